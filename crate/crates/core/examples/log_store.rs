//! Capacity-bounded segmented log: rotation, read-back, the HTML page and
//! a timed replay.
//!
//! ```bash
//! cargo run -p phytosense --example log_store
//! ```

use std::error::Error;
use std::time::Instant;

use phytosense::store::{read_log, replay, LogStore, StoreConfig};
use phytosense::types::Record;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let config = StoreConfig {
        dir: dir.path().join("log"),
        capacity_bytes: 16 * 1024,
        segment_bytes: 4 * 1024,
        ..StoreConfig::default()
    };
    let channels = vec!["bio1".to_string(), "air_temp".to_string()];
    let mut store = LogStore::create(&config, channels)?;
    for i in 0..2000i64 {
        let mut r = Record::new(1_717_200_000_000 + i * 100);
        r.insert("bio1", 0.01 + (i % 50) as f64 * 64e-9);
        r.insert("air_temp", 20.0 + (i as f64 / 300.0).sin());
        store.append(&r)?;
    }
    println!(
        "{} bytes in {} segments (capacity {}), {} segments evicted",
        store.total_bytes(),
        store.segment_count(),
        store.capacity_bytes(),
        store.evicted_segments()
    );
    let (_, records) = read_log(&config.dir)?;
    println!("kept records {}..{}", records[0].timestamp_ms, records.last().unwrap().timestamp_ms);

    let page = dir.path().join("plot.html");
    store.emit_html(100, &page)?;
    println!("html page: {} bytes", std::fs::metadata(&page)?.len());

    let last: Vec<Record> = records[records.len() - 5..].to_vec();
    let start = Instant::now();
    let n = replay(last, 2.0)?.count();
    println!("replayed {n} records (400 ms of data) at 2x in {:?}", start.elapsed());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
