//! Detector bank and numeric processors.
//!
//! Each detector reads one channel from one data pipe and writes a single
//! entry into the per-cycle output vector: `1` when its condition holds,
//! `-1` when it does not, `0` when it did not run (disabled, its pipe had no
//! new data, or the window was too short), or a number for the numeric
//! processors. Detectors are pure functions of their pipe snapshot and the
//! clock, so the bank can be evaluated in any order or in parallel.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Snapshot, Tier};
use crate::types::{AcquisitionSchedule, TimestampMs};

/// Scale factor from median absolute deviation to σ for Gaussian data.
pub const MAD_TO_SIGMA: f64 = 1.4826;

const MS_PER_HOUR: f64 = 3_600_000.0;
const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("detector `{id}` reads unknown channel `{channel}`")]
    UnknownChannel { id: String, channel: String },
    #[error("duplicate detector id `{0}`")]
    DuplicateId(String),
    #[error("detector `{id}`: {msg}")]
    BadParam { id: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputValue {
    True,
    False,
    NotExecuted,
    Numeric(f64),
}

impl OutputValue {
    pub fn from_bool(b: bool) -> Self {
        if b {
            OutputValue::True
        } else {
            OutputValue::False
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            OutputValue::True => 1.0,
            OutputValue::False => -1.0,
            OutputValue::NotExecuted => 0.0,
            OutputValue::Numeric(x) => x,
        }
    }

    pub fn executed(self) -> bool {
        self != OutputValue::NotExecuted
    }
}

impl fmt::Display for OutputValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputValue::True => f.write_str("1"),
            OutputValue::False => f.write_str("-1"),
            OutputValue::NotExecuted => f.write_str("0"),
            OutputValue::Numeric(x) => write!(f, "{x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputVector {
    pub cycle_id: u64,
    pub timestamp_ms: TimestampMs,
    pub entries: Vec<(String, OutputValue)>,
}

impl OutputVector {
    pub fn get(&self, id: &str) -> Option<OutputValue> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, v)| *v)
    }
}

fn default_sigma() -> f64 {
    5.0
}
fn default_min_samples() -> usize {
    20
}
fn default_yellow() -> f64 {
    2.0
}
fn default_red() -> f64 {
    4.0
}
fn default_width() -> f64 {
    1.0
}
fn default_min_corr() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorKind {
    /// Open during `[k·interval, k·interval + width)` since experiment start.
    TimeInterval {
        interval_s: f64,
        #[serde(default = "default_width")]
        width_s: f64,
    },
    /// Open during a wall-clock window `[start, end)`, wrapping past midnight.
    TimeOfDay {
        start_s: f64,
        end_s: f64,
        #[serde(default)]
        utc_offset_hours: f64,
    },
    Peak {
        #[serde(default = "default_sigma")]
        threshold_sigma: f64,
        /// Shorter windows are not evaluated; the MAD of a handful of
        /// samples is too unstable to scale a threshold.
        #[serde(default = "default_min_samples")]
        min_samples: usize,
    },
    CyclicalChange {
        period_samples: usize,
        #[serde(default = "default_min_corr")]
        min_correlation: f64,
    },
    NoiseLevel,
    GradientChange {
        slope_per_hour: f64,
    },
    Mean,
    Stddev,
    Zscore,
    PathogenicityStatus {
        #[serde(default = "default_yellow")]
        z_yellow: f64,
        #[serde(default = "default_red")]
        z_red: f64,
    },
}

impl DetectorKind {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DetectorKind::NoiseLevel
                | DetectorKind::Mean
                | DetectorKind::Stddev
                | DetectorKind::Zscore
                | DetectorKind::PathogenicityStatus { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub id: String,
    /// Input channel name; `"0"` switches the detector off.
    pub channel: String,
    #[serde(default = "default_tier")]
    pub tier: Tier,
    /// Use only the most recent `window` samples of the pipe.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(flatten)]
    pub kind: DetectorKind,
}

fn default_tier() -> Tier {
    Tier::Short
}

impl DetectorConfig {
    pub fn new(id: impl Into<String>, channel: impl Into<String>, tier: Tier, kind: DetectorKind) -> Self {
        DetectorConfig { id: id.into(), channel: channel.into(), tier, window: None, kind }
    }

    pub fn enabled(&self) -> bool {
        self.channel != "0"
    }
}

/// Startup validation: unique ids, known channels, sane parameters.
pub fn validate_detectors(
    configs: &[DetectorConfig],
    schedule: &AcquisitionSchedule,
) -> Result<(), DetectorError> {
    let mut ids = HashSet::new();
    for d in configs {
        if !ids.insert(d.id.as_str()) {
            return Err(DetectorError::DuplicateId(d.id.clone()));
        }
        if d.enabled() && schedule.channel(&d.channel).is_none() {
            return Err(DetectorError::UnknownChannel { id: d.id.clone(), channel: d.channel.clone() });
        }
        let bad = |msg: &str| Err(DetectorError::BadParam { id: d.id.clone(), msg: msg.into() });
        match d.kind {
            DetectorKind::TimeInterval { interval_s, width_s } => {
                if !(interval_s > 0.0 && width_s > 0.0) {
                    return bad("interval_s and width_s must be positive");
                }
            }
            DetectorKind::TimeOfDay { start_s, end_s, .. } => {
                let day = 86_400.0;
                if !((0.0..day).contains(&start_s) && (0.0..=day).contains(&end_s)) {
                    return bad("start_s/end_s must lie within one day");
                }
            }
            DetectorKind::Peak { threshold_sigma, min_samples } => {
                if !(threshold_sigma > 0.0) || min_samples < 3 {
                    return bad("threshold_sigma must be positive and min_samples >= 3");
                }
            }
            DetectorKind::CyclicalChange { period_samples, min_correlation } => {
                if period_samples == 0 || !(-1.0..=1.0).contains(&min_correlation) {
                    return bad("period_samples must be >= 1 and min_correlation in [-1, 1]");
                }
            }
            DetectorKind::GradientChange { slope_per_hour } if !(slope_per_hour >= 0.0) => {
                return bad("slope_per_hour must be >= 0");
            }
            DetectorKind::PathogenicityStatus { z_yellow, z_red } if !(0.0 < z_yellow && z_yellow < z_red) => {
                return bad("need 0 < z_yellow < z_red");
            }
            _ => {}
        }
        if d.window == Some(0) {
            return bad("window must be positive");
        }
    }
    Ok(())
}

/// Detector clock: current cycle time and experiment start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    pub now_ms: TimestampMs,
    pub start_ms: TimestampMs,
}

/// Snapshots of the pipes that signalled new data this cycle.
#[derive(Debug, Clone, Default)]
pub struct ReadySnapshots {
    tiers: [Option<Snapshot>; 3],
}

impl ReadySnapshots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, tier: Tier, snapshot: Snapshot) -> Self {
        self.set(tier, snapshot);
        self
    }

    pub fn set(&mut self, tier: Tier, snapshot: Snapshot) {
        self.tiers[tier as usize] = Some(snapshot);
    }

    pub fn get(&self, tier: Tier) -> Option<&Snapshot> {
        self.tiers[tier as usize].as_ref()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `1` iff some sample deviates from the window median by more than
/// `threshold_sigma` robust standard deviations (1.4826 · MAD).
pub fn peak_detect(window: &[f64], threshold_sigma: f64) -> OutputValue {
    if window.len() < 3 {
        return OutputValue::NotExecuted;
    }
    let s = sorted(window);
    let med = median(&s);
    let dev: Vec<f64> = sorted(&window.iter().map(|x| (x - med).abs()).collect::<Vec<_>>());
    let sigma = MAD_TO_SIGMA * median(&dev);
    let max_dev = *dev.last().expect("non-empty");
    OutputValue::from_bool(max_dev > threshold_sigma * sigma)
}

/// Least-squares slope of `values` against `times_ms`, in units per hour.
pub fn least_squares_slope(times_ms: &[TimestampMs], values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 || times_ms.len() != n {
        return None;
    }
    let t0 = times_ms[0];
    let xs: Vec<f64> = times_ms.iter().map(|t| (t - t0) as f64 / MS_PER_HOUR).collect();
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(values) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

pub fn gradient_change(times_ms: &[TimestampMs], values: &[f64], slope_per_hour: f64) -> OutputValue {
    match least_squares_slope(times_ms, values) {
        Some(slope) => OutputValue::from_bool(slope.abs() > slope_per_hour),
        None => OutputValue::NotExecuted,
    }
}

/// High-frequency noise estimate: RMS of first differences over √2.
pub fn noise_level(window: &[f64]) -> Option<f64> {
    if window.len() < 2 {
        return None;
    }
    let n = (window.len() - 1) as f64;
    let ms: f64 = window.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / n;
    Some((ms / 2.0).sqrt())
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// `1` iff the window correlates with itself shifted by `period_samples`
/// (Pearson coefficient of the overlapping parts) above `min_correlation`.
pub fn cyclical_change(window: &[f64], period_samples: usize, min_correlation: f64) -> OutputValue {
    if period_samples == 0 || window.len() < 2 * period_samples {
        return OutputValue::NotExecuted;
    }
    let n = window.len();
    match pearson(&window[..n - period_samples], &window[period_samples..]) {
        Some(r) => OutputValue::from_bool(r > min_correlation),
        None => OutputValue::False,
    }
}

/// Periodic gate, closed at its start and open at its end.
pub fn time_interval_gate(elapsed_ms: i64, interval_ms: i64, width_ms: i64) -> OutputValue {
    OutputValue::from_bool(elapsed_ms.rem_euclid(interval_ms) < width_ms)
}

/// Wall-clock gate `[start_s, end_s)` in seconds of the (offset) day.
/// When `end_s < start_s` the window wraps over midnight.
pub fn time_of_day_gate(t_ms: TimestampMs, start_s: f64, end_s: f64, utc_offset_hours: f64) -> OutputValue {
    let local = t_ms + (utc_offset_hours * 3_600_000.0).round() as i64;
    let sod = local.rem_euclid(MS_PER_DAY) as f64 / 1000.0;
    let inside = if start_s <= end_s {
        start_s <= sod && sod < end_s
    } else {
        sod >= start_s || sod < end_s
    };
    OutputValue::from_bool(inside)
}

pub fn mean(window: &[f64]) -> Option<f64> {
    if window.is_empty() {
        return None;
    }
    Some(window.iter().sum::<f64>() / window.len() as f64)
}

/// Population standard deviation.
pub fn stddev(window: &[f64]) -> Option<f64> {
    let m = mean(window)?;
    let var = window.iter().map(|x| (x - m).powi(2)).sum::<f64>() / window.len() as f64;
    Some(var.sqrt())
}

/// z-score of the latest sample against the rest of the window.
/// `None` when the reference part is shorter than 2 samples or has σ = 0.
pub fn zscore(window: &[f64]) -> Option<f64> {
    let (latest, rest) = window.split_last()?;
    if rest.len() < 2 {
        return None;
    }
    let m = mean(rest)?;
    let s = stddev(rest)?;
    if s == 0.0 {
        return None;
    }
    Some((latest - m) / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Status {
    Green = 0,
    Yellow = 1,
    Red = 2,
}

pub fn pathogenicity_status(z: f64, z_yellow: f64, z_red: f64) -> Status {
    let a = z.abs();
    if a < z_yellow {
        Status::Green
    } else if a < z_red {
        Status::Yellow
    } else {
        Status::Red
    }
}

fn window_of(cfg: &DetectorConfig, snap: &Snapshot) -> (Vec<TimestampMs>, Vec<f64>) {
    let skip = cfg.window.map_or(0, |w| snap.len().saturating_sub(w));
    snap.iter()
        .skip(skip)
        .filter_map(|r| r.get(&cfg.channel).map(|v| (r.timestamp_ms, v)))
        .unzip()
}

/// Evaluate one detector.
pub fn evaluate(cfg: &DetectorConfig, ready: &ReadySnapshots, clock: Clock) -> OutputValue {
    if !cfg.enabled() {
        return OutputValue::NotExecuted;
    }
    let Some(snap) = ready.get(cfg.tier) else {
        return OutputValue::NotExecuted;
    };
    let numeric = |x: Option<f64>| x.map_or(OutputValue::NotExecuted, OutputValue::Numeric);
    match &cfg.kind {
        DetectorKind::TimeInterval { interval_s, width_s } => time_interval_gate(
            clock.now_ms - clock.start_ms,
            (interval_s * 1000.0).round() as i64,
            (width_s * 1000.0).round() as i64,
        ),
        DetectorKind::TimeOfDay { start_s, end_s, utc_offset_hours } => {
            time_of_day_gate(clock.now_ms, *start_s, *end_s, *utc_offset_hours)
        }
        kind => {
            let (times, values) = window_of(cfg, snap);
            match kind {
                DetectorKind::Peak { threshold_sigma, min_samples } => {
                    if values.len() < *min_samples {
                        OutputValue::NotExecuted
                    } else {
                        peak_detect(&values, *threshold_sigma)
                    }
                }
                DetectorKind::CyclicalChange { period_samples, min_correlation } => {
                    cyclical_change(&values, *period_samples, *min_correlation)
                }
                DetectorKind::NoiseLevel => numeric(noise_level(&values)),
                DetectorKind::GradientChange { slope_per_hour } => {
                    gradient_change(&times, &values, *slope_per_hour)
                }
                DetectorKind::Mean => numeric(mean(&values)),
                DetectorKind::Stddev => numeric(if values.len() < 2 { None } else { stddev(&values) }),
                DetectorKind::Zscore => numeric(zscore(&values)),
                DetectorKind::PathogenicityStatus { z_yellow, z_red } => numeric(
                    zscore(&values).map(|z| pathogenicity_status(z, *z_yellow, *z_red) as u8 as f64),
                ),
                DetectorKind::TimeInterval { .. } | DetectorKind::TimeOfDay { .. } => {
                    unreachable!("handled above")
                }
            }
        }
    }
}

/// Evaluate the whole bank, one entry per configured detector in order.
pub fn run_detectors(
    cycle_id: u64,
    configs: &[DetectorConfig],
    ready: &ReadySnapshots,
    clock: Clock,
) -> OutputVector {
    OutputVector {
        cycle_id,
        timestamp_ms: clock.now_ms,
        entries: configs.iter().map(|c| (c.id.clone(), evaluate(c, ready, clock))).collect(),
    }
}

/// Same as [`run_detectors`], fanned out over the rayon pool.
pub fn run_detectors_parallel(
    cycle_id: u64,
    configs: &[DetectorConfig],
    ready: &ReadySnapshots,
    clock: Clock,
) -> OutputVector {
    OutputVector {
        cycle_id,
        timestamp_ms: clock.now_ms,
        entries: configs.par_iter().map(|c| (c.id.clone(), evaluate(c, ready, clock))).collect(),
    }
}
