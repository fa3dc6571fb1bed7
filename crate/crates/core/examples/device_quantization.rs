//! Device-resolution digitization of every channel kind, including the
//! 64 nV biopotential step and the LM35 temperature path.
//!
//! ```bash
//! cargo run -p phytosense --example device_quantization
//! ```

use std::error::Error;

use phytosense::sim::{lm35_read, LM35_STEP_C};
use phytosense::types::{ChannelKind, BIOPOTENTIAL_RESOLUTION_V};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let raw = 0.012_345_678_9;
    let v = ChannelKind::Biopotential1.digitize(raw)?;
    println!(
        "bio: {raw} V -> {v} V = {} x 64 nV",
        (v / BIOPOTENTIAL_RESOLUTION_V).round()
    );
    for kind in ChannelKind::ALL {
        let (lo, hi) = kind.range();
        let res = kind.resolution().map_or("analysis".to_string(), |r| format!("{r:e}"));
        println!("{:<22} range [{lo}, {hi}] step {res}", kind.as_str());
    }
    println!("LM35 step {:.3e} °C", LM35_STEP_C);
    for t in [24.0, 24.000_01, 24.000_03, 25.0] {
        println!("LM35 {t:.5} °C -> {:.7} °C ({:.4} mV)", lm35_read(t), lm35_read(t) * 10.0);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
