//! Harmonic amplitudes and THD of a distorted period-stable buffer.
//!
//! ```bash
//! cargo run -p phytosense --example scope_distortion
//! ```

use std::error::Error;
use std::f64::consts::PI;

use phytosense::fra::scope_spectrum;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let (n, cycles) = (1024usize, 8usize);
    let samples: Vec<f64> = (0..n)
        .map(|k| {
            let x = 2.0 * PI * cycles as f64 * k as f64 / n as f64;
            x.sin() + 0.1 * (3.0 * x).sin() + 0.02 * (5.0 * x + 0.3).sin()
        })
        .collect();
    let spectrum = scope_spectrum(&samples, cycles, 7)?;
    for (h, a) in &spectrum.harmonics {
        println!("h{h}: {a:.6}");
    }
    println!("h3/h1 = {:.6}", spectrum.amplitude(3).unwrap() / spectrum.amplitude(1).unwrap());
    println!("THD = {:.4} %", spectrum.thd().unwrap_or(0.0) * 100.0);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
