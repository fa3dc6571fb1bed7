//! One day of 1 s records through the short/middle/long pipes.
//!
//! ```bash
//! cargo run -p phytosense --example tiered_pipes
//! ```

use std::error::Error;

use phytosense::pipeline::{PipeCapacities, PipeSet, Tier};
use phytosense::types::Record;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let mut pipes = PipeSet::new(PipeCapacities::default())?;
    let mut ready_counts = [0u64; 3];
    for i in 0..86_400i64 {
        let mut r = Record::new(i * 1000);
        r.insert("bio1", i as f64);
        for tier in pipes.push(r)? {
            ready_counts[tier as usize] += 1;
        }
    }
    for tier in Tier::ALL {
        let snap = pipes.snapshot(tier);
        let spacing = snap[1].timestamp_ms - snap[0].timestamp_ms;
        println!(
            "{tier:>6}: {} records, spacing {} s, last at {} s, ready {} times",
            snap.len(),
            spacing / 1000,
            snap.last().unwrap().timestamp_ms / 1000,
            ready_counts[tier as usize]
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
