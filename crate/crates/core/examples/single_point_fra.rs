//! Single-bin Fourier projection of a period-stable buffer, next to the RMS
//! ratio and lock-in correlation estimates of the same pair.
//!
//! ```bash
//! cargo run -p phytosense --example single_point_fra
//! ```

use std::error::Error;

use phytosense::fra::{
    analyze_pair, fra_single_point, magnitude_phase, plan_frequency, ExcitationWaveform, ResponseBuffer,
    DEFAULT_CLOCK_HZ, DEFAULT_SAMPLE_COUNT,
};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let plan = plan_frequency(500.0, DEFAULT_SAMPLE_COUNT, DEFAULT_CLOCK_HZ)?;
    println!(
        "500 Hz -> {} Hz, {} cycles in {} samples at {} S/s",
        plan.frequency_hz, plan.cycles, plan.sample_count, plan.sample_rate
    );
    let vv = ExcitationWaveform::from_plan(&plan, 0.1)?;

    // a load of 2 kΩ at -30°: the current leads the voltage by 30°
    let (z, phi) = (2000.0_f64, -30f64.to_radians());
    let step = 2.0 * std::f64::consts::PI * plan.cycles as f64 / plan.sample_count as f64;
    let samples = (0..plan.sample_count)
        .map(|k| 0.1 / z * (step * k as f64 - phi).sin())
        .collect();
    let vi = ResponseBuffer { frequency: vv.frequency(), sample_rate: vv.sample_rate(), samples };

    let bin = fra_single_point(&vi.samples, plan.cycles)?;
    let (mag, phase) = magnitude_phase(bin);
    println!("response bin: re {:.3e} im {:.3e} |.| {:.3e} phase {:?}", bin.re, bin.im, mag, phase);

    let a = analyze_pair(&vv, &vi, 1.0)?;
    println!("|Z| = {:.4} Ω  phase = {:.4}°", a.magnitude, a.phase_deg);
    println!("M_rms = {:.4} Ω  P_c = {:.4}° (gamma {:.4e})", a.m_rms, a.p_c, a.gamma);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
