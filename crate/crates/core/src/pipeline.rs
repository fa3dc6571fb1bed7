//! Short/middle/long-term data pipes.
//!
//! Every record enters the short-term pipe. Each time the short-term pipe
//! completes a cycle (`capacity` records since the last hand-off) its most
//! recent record is copied into the middle-term pipe, and likewise from the
//! middle-term into the long-term pipe. Pipes are rings: once full, the
//! oldest record is evicted.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Record, TimestampMs};

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("timestamp {got} is not after the last pushed timestamp {last}")]
    NonMonotonic { last: TimestampMs, got: TimestampMs },
    #[error("pipe capacity must be positive")]
    ZeroCapacity,
    #[error("unknown tier `{0}` (expected short, middle or long)")]
    UnknownTier(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Short,
    Middle,
    Long,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Short, Tier::Middle, Tier::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Short => "short",
            Tier::Middle => "middle",
            Tier::Long => "long",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(Tier::Short),
            "middle" => Ok(Tier::Middle),
            "long" => Ok(Tier::Long),
            other => Err(PipelineError::UnknownTier(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipeCapacities {
    pub short: usize,
    pub middle: usize,
    pub long: usize,
}

impl Default for PipeCapacities {
    fn default() -> Self {
        PipeCapacities { short: 60, middle: 60, long: 24 }
    }
}

/// Point-in-time copy of one pipe, oldest record first.
pub type Snapshot = Arc<[Arc<Record>]>;

#[derive(Debug, Clone)]
pub struct TierPipe {
    tier: Tier,
    capacity: usize,
    buffer: VecDeque<Arc<Record>>,
    /// Records received since the last hand-off to the next tier.
    fill_count: usize,
    /// Completed cycles.
    cycle_count: u64,
}

impl TierPipe {
    pub fn new(tier: Tier, capacity: usize) -> Result<Self, PipelineError> {
        if capacity == 0 {
            return Err(PipelineError::ZeroCapacity);
        }
        Ok(TierPipe {
            tier,
            capacity,
            buffer: VecDeque::with_capacity(capacity),
            fill_count: 0,
            cycle_count: 0,
        })
    }

    pub fn tier(&self) -> Tier {
        self.tier
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.buffer.len()
    }
    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }
    pub fn cycle_count(&self) -> u64 {
        self.cycle_count
    }

    /// Append; returns the record to hand off when this push completes a cycle.
    fn push(&mut self, record: Arc<Record>) -> Option<Arc<Record>> {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(record);
        self.fill_count += 1;
        if self.fill_count == self.capacity {
            self.fill_count = 0;
            self.cycle_count += 1;
            self.buffer.back().cloned()
        } else {
            None
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.buffer.iter().cloned().collect()
    }
}

/// The three pipes fed by one acquisition loop.
#[derive(Debug, Clone)]
pub struct PipeSet {
    pipes: [TierPipe; 3],
    last_ts: Option<TimestampMs>,
}

impl PipeSet {
    pub fn new(capacities: PipeCapacities) -> Result<Self, PipelineError> {
        Ok(PipeSet {
            pipes: [
                TierPipe::new(Tier::Short, capacities.short)?,
                TierPipe::new(Tier::Middle, capacities.middle)?,
                TierPipe::new(Tier::Long, capacities.long)?,
            ],
            last_ts: None,
        })
    }

    /// Push one record. Returns the tiers that received new data, which is
    /// the "new data are ready" signal for detectors on those tiers.
    pub fn push(&mut self, record: Record) -> Result<Vec<Tier>, PipelineError> {
        if let Some(last) = self.last_ts {
            if record.timestamp_ms <= last {
                return Err(PipelineError::NonMonotonic { last, got: record.timestamp_ms });
            }
        }
        self.last_ts = Some(record.timestamp_ms);
        let mut ready = vec![Tier::Short];
        let mut carry = self.pipes[0].push(Arc::new(record));
        for next in [Tier::Middle, Tier::Long] {
            match carry {
                Some(rec) => {
                    ready.push(next);
                    carry = self.pipes[next.index()].push(rec);
                }
                None => break,
            }
        }
        Ok(ready)
    }

    pub fn pipe(&self, tier: Tier) -> &TierPipe {
        &self.pipes[tier.index()]
    }

    pub fn snapshot(&self, tier: Tier) -> Snapshot {
        self.pipe(tier).snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(i: i64) -> Record {
        let mut r = Record::new(i * 1000);
        r.insert("bio1", i as f64);
        r
    }

    fn fill(set: &mut PipeSet, n: i64) {
        for i in 0..n {
            set.push(rec(i)).unwrap();
        }
    }

    #[test]
    fn middle_tier_fills_after_full_short_cycle() {
        let mut set = PipeSet::new(PipeCapacities::default()).unwrap();
        fill(&mut set, 59);
        assert!(set.pipe(Tier::Middle).is_empty());
        let ready = set.push(rec(59)).unwrap();
        assert_eq!(ready, vec![Tier::Short, Tier::Middle]);
        assert_eq!(set.pipe(Tier::Middle).len(), 1);
        // hand-off is the last record of the completed cycle
        assert_eq!(set.snapshot(Tier::Middle)[0].timestamp_ms, 59_000);
    }

    #[test]
    fn long_tier_after_short_times_middle() {
        let mut set = PipeSet::new(PipeCapacities::default()).unwrap();
        fill(&mut set, 60 * 60 - 1);
        assert!(set.pipe(Tier::Long).is_empty());
        let ready = set.push(rec(3599)).unwrap();
        assert_eq!(ready, Tier::ALL.to_vec());
        assert_eq!(set.pipe(Tier::Long).len(), 1);
    }

    #[test]
    fn rejects_non_monotonic_timestamps() {
        let mut set = PipeSet::new(PipeCapacities::default()).unwrap();
        set.push(rec(5)).unwrap();
        assert_eq!(set.push(rec(5)), Err(PipelineError::NonMonotonic { last: 5000, got: 5000 }));
        assert!(set.push(rec(4)).is_err());
        assert_eq!(set.pipe(Tier::Short).len(), 1);
    }

    #[test]
    fn snapshots_are_immutable() {
        let mut set = PipeSet::new(PipeCapacities { short: 3, middle: 2, long: 2 }).unwrap();
        assert!(set.snapshot(Tier::Long).is_empty());
        fill(&mut set, 2);
        let snap = set.snapshot(Tier::Short);
        set.push(rec(2)).unwrap();
        set.push(rec(3)).unwrap();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap[0].timestamp_ms, 0);
        assert_eq!(set.snapshot(Tier::Short)[0].timestamp_ms, 1000);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(PipeSet::new(PipeCapacities { short: 0, middle: 1, long: 1 }).is_err());
        assert_eq!("hourly".parse::<Tier>(), Err(PipelineError::UnknownTier("hourly".into())));
    }

    proptest! {
        #[test]
        fn cadence_is_conserved(short in 1usize..12, middle in 1usize..12, long in 1usize..6, pushes in 0i64..600) {
            let mut set = PipeSet::new(PipeCapacities { short, middle, long }).unwrap();
            fill(&mut set, pushes);
            let p = pushes as usize;
            let handed_mid = p / short;
            let handed_long = handed_mid / middle;
            prop_assert_eq!(set.pipe(Tier::Short).len(), p.min(short));
            prop_assert_eq!(set.pipe(Tier::Middle).len(), handed_mid.min(middle));
            prop_assert_eq!(set.pipe(Tier::Long).len(), handed_long.min(long));
            // every middle record is the last of a completed short cycle
            for r in set.snapshot(Tier::Middle).iter() {
                let idx = (r.timestamp_ms / 1000) as usize;
                prop_assert_eq!((idx + 1) % short, 0);
            }
            for tier in Tier::ALL {
                let snap = set.snapshot(tier);
                prop_assert!(snap.windows(2).all(|w| w[0].timestamp_ms < w[1].timestamp_ms));
            }
        }
    }
}
