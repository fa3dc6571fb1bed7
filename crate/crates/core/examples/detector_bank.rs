//! The detector bank on a short-tier snapshot holding a spike, then on a
//! quiet one.
//!
//! ```bash
//! cargo run -p phytosense --example detector_bank
//! ```

use std::error::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use phytosense::detectors::{run_detectors, Clock, DetectorConfig, DetectorKind, ReadySnapshots};
use phytosense::pipeline::{PipeCapacities, PipeSet, Tier};
use phytosense::types::Record;

fn bank() -> Vec<DetectorConfig> {
    let d = |id: &str, kind| DetectorConfig::new(id, "bio1", Tier::Short, kind);
    vec![
        d("PEAK", DetectorKind::Peak { threshold_sigma: 5.0, min_samples: 20 }),
        d("NOISE", DetectorKind::NoiseLevel),
        d("TREND", DetectorKind::GradientChange { slope_per_hour: 0.01 }),
        d("CYCLE", DetectorKind::CyclicalChange { period_samples: 12, min_correlation: 0.5 }),
        d("MEAN", DetectorKind::Mean),
        d("Z", DetectorKind::Zscore),
        d("HEALTH", DetectorKind::PathogenicityStatus { z_yellow: 2.0, z_red: 4.0 }),
        d("EVERY_10S", DetectorKind::TimeInterval { interval_s: 10.0, width_s: 1.0 }),
        DetectorConfig::new("OFF", "0", Tier::Short, DetectorKind::Mean),
    ]
}

fn fill(spike_at: Option<i64>) -> Result<(PipeSet, i64), Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 20e-6)?;
    let mut pipes = PipeSet::new(PipeCapacities::default())?;
    let mut t = 0;
    for i in 0..60 {
        t = i * 1000;
        let mut r = Record::new(t);
        let spike = if Some(i) == spike_at { 2e-3 } else { 0.0 };
        r.insert("bio1", 0.01 + noise.sample(&mut rng) + spike);
        pipes.push(r)?;
    }
    Ok((pipes, t))
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let configs = bank();
    for (label, spike) in [("spike", Some(59)), ("quiet", None)] {
        let (pipes, now_ms) = fill(spike)?;
        let ready = ReadySnapshots::new().with(Tier::Short, pipes.snapshot(Tier::Short));
        let v = run_detectors(0, &configs, &ready, Clock { now_ms, start_ms: 0 });
        let line: Vec<String> = v.entries.iter().map(|(id, x)| format!("{id}={x}")).collect();
        println!("{label}: {}", line.join(" "));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
