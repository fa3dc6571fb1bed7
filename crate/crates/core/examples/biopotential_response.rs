//! Biopotential of a simulated plant around a touch: the fast action
//! potential, then the slow variation potential.
//!
//! ```bash
//! cargo run -p phytosense --example biopotential_response
//! ```

use std::error::Error;

use phytosense::sim::{BiopotentialProfile, EnvironmentModel, PlantSimulator, StimulusEvent, StimulusKind, TissueModel};
use phytosense::types::{default_channels, ChannelKind};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let t0 = 1_717_200_000_000;
    let profile = BiopotentialProfile { noise_rms: 0.0, ..Default::default() };
    let mut sim = PlantSimulator::new(TissueModel::default(), profile, EnvironmentModel::default(), t0)?;
    sim.inject(StimulusEvent::new(StimulusKind::Touch, t0 + 10_000, 1.0)?);

    let bio1 = default_channels().into_iter().find(|c| c.kind == ChannelKind::Biopotential1).unwrap();
    let quiet = sim.sample(&bio1, t0)?;
    for t_s in [0.0, 9.0, 10.5, 11.0, 11.8, 15.0, 40.0, 70.0, 130.0, 400.0] {
        let t = t0 + (t_s * 1000.0) as i64;
        let v = sim.sample(&bio1, t)?;
        let bar = "#".repeat(((v - quiet).max(0.0) * 2e4) as usize);
        println!("t={t_s:>6.1} s  bio1={:>10.3} mV  {bar}", v * 1e3);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
