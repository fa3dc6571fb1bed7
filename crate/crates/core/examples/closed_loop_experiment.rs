//! A 20 minute virtual experiment: touches raise the biopotential, the peak
//! detector fires, an LED lights and electrical stimulation feeds back into
//! the simulated tissue impedance.
//!
//! ```bash
//! cargo run -p phytosense --example closed_loop_experiment
//! ```

use std::error::Error;

use phytosense::config::parse_experiment;
use phytosense::runtime::{Experiment, LogTarget};

const EXPERIMENT: &str = r#"
seed = 7
duration_s = 1200

[impedance]
frequency_hz = 500
quantity = "im"

[[event]]
kind = "touch"
time_s = 300
[[event]]
kind = "touch"
time_s = 800

[[detector]]
id = "PEAK"
channel = "bio1"
kind = "peak"

[actuator.led]
kind = "rgb_led"

[actuator.stim]
kind = "electrical_stimulation"
intensity = 1.0

[[binding]]
id = "light_up"
when = "PEAK"
actuator = "led"
color = "green"

[[binding]]
id = "answer"
when = "PEAK AND BERNOULLI(0.2)"
actuator = "stim"
"#;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let config = parse_experiment(EXPERIMENT)?;
    let mut exp = Experiment::new(config, LogTarget::Discard)?;
    let mut last_im = None;
    while let Some(outcome) = exp.step()? {
        for c in &outcome.commands {
            if c.binding_id == "answer" || outcome.cycle_id % 60 == 0 {
                println!("cycle {:>4}: {} -> {} {:?}", outcome.cycle_id, c.binding_id, c.actuator, c.action);
            }
        }
        if outcome.cycle_id % 100 == 0 {
            let im = exp.simulator().tissue_at(outcome.vector.timestamp_ms).r_parallel;
            if last_im != Some(im) {
                println!("cycle {:>4}: tissue r_parallel = {im:.1} Ω", outcome.cycle_id);
                last_im = Some(im);
            }
        }
    }
    println!("LED: {:?}", exp.decisions().dispatcher().state().led);
    println!("stimuli applied: {}", exp.simulator().events().len() - 2);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
