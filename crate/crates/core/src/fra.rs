//! Impedance estimators: excitation synthesis, single-point DFT, RMS
//! resistivity, lock-in correlation and phase, frequency sweeps and
//! harmonic (scope-mode) analysis.
//!
//! Everything here works on period-stable buffers, i.e. buffers that contain
//! an integer number of excitation cycles. Under that condition a single DFT
//! bin carries the full energy of the excitation tone and the RMS, FRA and
//! correlation routes agree exactly for clean sinusoids.

use std::error::Error as StdError;
use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_FREQUENCY_HZ: f64 = 8.0;
pub const MAX_FREQUENCY_HZ: f64 = 6.5e5;
pub const MIN_AMPLITUDE_V: f64 = 0.01;
pub const MAX_AMPLITUDE_V: f64 = 1.0;

/// Samples per analysis buffer unless configured otherwise.
pub const DEFAULT_SAMPLE_COUNT: usize = 1024;
/// Master clock from which sample rates are derived by integer division.
pub const DEFAULT_CLOCK_HZ: f64 = 12.8e6;

const PERIOD_STABLE_TOL: f64 = 1e-9;
const CORRELATION_EXCESS_WARN: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum FraError {
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("buffer needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("{cycles} cycles per buffer is outside [1, {n}/2)")]
    BadCycles { cycles: usize, n: usize },
    #[error("frequency {0} Hz is outside [{MIN_FREQUENCY_HZ}, {MAX_FREQUENCY_HZ}] Hz")]
    FrequencyOutOfRange(f64),
    #[error("amplitude {0} V is outside [{MIN_AMPLITUDE_V}, {MAX_AMPLITUDE_V}] V")]
    AmplitudeOutOfRange(f64),
    #[error("{frequency} Hz at {sample_rate} Hz over {n} samples gives {cycles} cycles, not an integer")]
    NotPeriodStable { frequency: f64, sample_rate: f64, n: usize, cycles: f64 },
    #[error("frequency {frequency} Hz is not below Nyquist ({sample_rate} Hz sampling)")]
    AboveNyquist { frequency: f64, sample_rate: f64 },
    #[error("buffer lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("response RMS is zero (open circuit)")]
    OpenCircuit,
    #[error("excitation RMS is zero")]
    ZeroExcitation,
    #[error("excitation and response disagree on {0}")]
    Unpaired(&'static str),
    #[error("invalid sweep: {0}")]
    BadSweep(String),
    #[error("no period-stable sample rate found for {0} Hz")]
    NoPlan(f64),
}

/// Complex single-bin projection of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexResponse {
    pub re: f64,
    pub im: f64,
}

impl ComplexResponse {
    pub fn magnitude(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Sampling plan that puts an integer number of cycles in one buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodStablePlan {
    pub requested_hz: f64,
    pub frequency_hz: f64,
    pub sample_rate: f64,
    pub sample_count: usize,
    pub cycles: usize,
}

impl PeriodStablePlan {
    pub fn snap_error_hz(&self) -> f64 {
        self.frequency_hz - self.requested_hz
    }
}

/// Snap `frequency` to the nearest value reachable with `sample_count`
/// samples at a rate of `clock_hz / divider`.
///
/// Searches every cycle count below Nyquist; ties go to fewer cycles.
pub fn plan_frequency(
    frequency: f64,
    sample_count: usize,
    clock_hz: f64,
) -> Result<PeriodStablePlan, FraError> {
    if !(MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&frequency) {
        return Err(FraError::FrequencyOutOfRange(frequency));
    }
    if sample_count < 4 {
        return Err(FraError::TooShort(sample_count));
    }
    let n = sample_count as f64;
    let mut best: Option<(f64, PeriodStablePlan)> = None;
    for cycles in 1..sample_count.div_ceil(2) {
        let c = cycles as f64;
        let divider = (clock_hz * c / (frequency * n)).round().max(1.0);
        let rate = clock_hz / divider;
        let snapped = c * rate / n;
        if !(MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&snapped) {
            continue;
        }
        let err = (snapped - frequency).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((
                err,
                PeriodStablePlan {
                    requested_hz: frequency,
                    frequency_hz: snapped,
                    sample_rate: rate,
                    sample_count,
                    cycles,
                },
            ));
        }
    }
    best.map(|(_, p)| p).ok_or(FraError::NoPlan(frequency))
}

fn check_period_stable(frequency: f64, n: usize, sample_rate: f64) -> Result<usize, FraError> {
    let cycles = frequency * n as f64 / sample_rate;
    let whole = cycles.round();
    if whole < 1.0 || (cycles - whole).abs() > PERIOD_STABLE_TOL * whole.max(1.0) {
        return Err(FraError::NotPeriodStable { frequency, sample_rate, n, cycles });
    }
    if frequency >= sample_rate / 2.0 {
        return Err(FraError::AboveNyquist { frequency, sample_rate });
    }
    Ok(whole as usize)
}

/// Sine excitation `amplitude · sin(2π f k / rate)` over one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationWaveform {
    frequency: f64,
    amplitude: f64,
    sample_rate: f64,
    cycles: usize,
    samples: Vec<f64>,
}

impl ExcitationWaveform {
    pub fn synthesize(
        frequency: f64,
        amplitude: f64,
        sample_count: usize,
        sample_rate: f64,
    ) -> Result<Self, FraError> {
        if !(MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&frequency) {
            return Err(FraError::FrequencyOutOfRange(frequency));
        }
        if !(MIN_AMPLITUDE_V..=MAX_AMPLITUDE_V).contains(&amplitude) {
            return Err(FraError::AmplitudeOutOfRange(amplitude));
        }
        if sample_count < 2 {
            return Err(FraError::TooShort(sample_count));
        }
        let cycles = check_period_stable(frequency, sample_count, sample_rate)?;
        // phase from the integer cycle count keeps every buffer bit-identical
        // regardless of how the frequency was rounded
        let step = 2.0 * PI * cycles as f64 / sample_count as f64;
        let samples = (0..sample_count).map(|k| amplitude * (step * k as f64).sin()).collect();
        Ok(ExcitationWaveform { frequency, amplitude, sample_rate, cycles, samples })
    }

    pub fn from_plan(plan: &PeriodStablePlan, amplitude: f64) -> Result<Self, FraError> {
        Self::synthesize(plan.frequency_hz, amplitude, plan.sample_count, plan.sample_rate)
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }
    pub fn cycles(&self) -> usize {
        self.cycles
    }
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Digitized response `V_I(k)` paired with an excitation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseBuffer {
    pub frequency: f64,
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

/// Single-bin DFT at `cycles` cycles per buffer, normalized by `1/N`.
pub fn fra_single_point(samples: &[f64], cycles: usize) -> Result<ComplexResponse, FraError> {
    let n = samples.len();
    if n == 0 {
        return Err(FraError::EmptyBuffer);
    }
    if n < 2 {
        return Err(FraError::TooShort(n));
    }
    if cycles == 0 || 2 * cycles >= n {
        return Err(FraError::BadCycles { cycles, n });
    }
    let w = 2.0 * PI / n as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, &x) in samples.iter().enumerate() {
        // reduce k·c mod N first so the angle stays in [0, 2π)
        let phase = w * ((k * cycles) % n) as f64;
        let (s, c) = phase.sin_cos();
        re += x * c;
        im -= x * s;
    }
    let scale = 1.0 / n as f64;
    Ok(ComplexResponse { re: re * scale, im: im * scale })
}

/// Magnitude and full-quadrant phase in degrees, `(-180, 180]`.
/// The phase is `None` for a zero vector.
pub fn magnitude_phase(c: ComplexResponse) -> (f64, Option<f64>) {
    let m = c.magnitude();
    if m == 0.0 {
        return (0.0, None);
    }
    let mut p = c.im.atan2(c.re).to_degrees();
    if p <= -180.0 {
        p += 360.0;
    }
    (m, Some(p))
}

pub fn rms(samples: &[f64]) -> Result<f64, FraError> {
    if samples.is_empty() {
        return Err(FraError::EmptyBuffer);
    }
    let sum_sq: f64 = samples.iter().map(|x| x * x).sum();
    Ok((sum_sq / samples.len() as f64).sqrt())
}

/// Ratio of excitation RMS to response RMS.
pub fn rms_resistivity(vv_rms: f64, vi_rms: f64) -> Result<f64, FraError> {
    if vi_rms == 0.0 {
        return Err(FraError::OpenCircuit);
    }
    Ok(vv_rms / vi_rms)
}

/// Mean product of response and excitation samples.
pub fn lockin_correlation(vi: &[f64], vv: &[f64]) -> Result<f64, FraError> {
    if vi.len() != vv.len() {
        return Err(FraError::LengthMismatch(vi.len(), vv.len()));
    }
    if vi.is_empty() {
        return Err(FraError::EmptyBuffer);
    }
    let sum: f64 = vi.iter().zip(vv).map(|(a, b)| a * b).sum();
    Ok(sum / vi.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockinPhase {
    /// Unsigned phase offset in degrees, `[0, 180]`.
    pub p_c: f64,
    /// Amplitude normalization, `1 / (vi_rms · vv_rms)`.
    pub gamma: f64,
}

pub fn lockin_phase(correlation: f64, vi_rms: f64, vv_rms: f64) -> Result<LockinPhase, FraError> {
    if vi_rms == 0.0 {
        return Err(FraError::OpenCircuit);
    }
    if vv_rms == 0.0 {
        return Err(FraError::ZeroExcitation);
    }
    let gamma = 1.0 / (vi_rms * vv_rms);
    let x = gamma * correlation;
    if x.abs() > 1.0 + CORRELATION_EXCESS_WARN {
        log::warn!("normalized correlation {x} exceeds unit magnitude; clamping");
    }
    let p_c = x.clamp(-1.0, 1.0).acos().to_degrees();
    Ok(LockinPhase { p_c, gamma })
}

/// Full per-frequency result. `re`/`im`/`magnitude`/`phase_deg` describe the
/// complex ratio of the excitation and response FRA bins scaled by the
/// transimpedance gain, i.e. the impedance seen by the excitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpedanceAnalysis {
    pub frequency: f64,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
    pub phase_deg: f64,
    pub vi_rms: f64,
    pub vv_rms: f64,
    pub m_rms: f64,
    pub c: f64,
    pub p_c: f64,
    pub gamma: f64,
    /// Raw FRA bin of the response buffer.
    pub response: ComplexResponse,
}

pub fn analyze_pair(
    vv: &ExcitationWaveform,
    vi: &ResponseBuffer,
    transimpedance: f64,
) -> Result<ImpedanceAnalysis, FraError> {
    if vv.len() != vi.samples.len() {
        return Err(FraError::LengthMismatch(vv.len(), vi.samples.len()));
    }
    if vv.sample_rate != vi.sample_rate {
        return Err(FraError::Unpaired("sample rate"));
    }
    if vv.frequency != vi.frequency {
        return Err(FraError::Unpaired("frequency"));
    }
    let vi_rms = rms(&vi.samples)?;
    let vv_rms = rms(vv.samples())?;
    if vi_rms == 0.0 {
        return Err(FraError::OpenCircuit);
    }
    let ex = fra_single_point(vv.samples(), vv.cycles)?;
    let resp = fra_single_point(&vi.samples, vv.cycles)?;
    let denom = resp.re * resp.re + resp.im * resp.im;
    if denom == 0.0 {
        return Err(FraError::OpenCircuit);
    }
    // Z = G · ex / resp
    let re = transimpedance * (ex.re * resp.re + ex.im * resp.im) / denom;
    let im = transimpedance * (ex.im * resp.re - ex.re * resp.im) / denom;
    let (magnitude, phase) = magnitude_phase(ComplexResponse { re, im });
    let c = lockin_correlation(&vi.samples, vv.samples())?;
    let lock = lockin_phase(c, vi_rms, vv_rms)?;
    Ok(ImpedanceAnalysis {
        frequency: vv.frequency,
        re,
        im,
        magnitude,
        phase_deg: phase.unwrap_or(0.0),
        vi_rms,
        vv_rms,
        m_rms: rms_resistivity(vv_rms, vi_rms)? * transimpedance,
        c,
        p_c: lock.p_c,
        gamma: lock.gamma,
        response: resp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    #[default]
    Logarithmic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub f_min: f64,
    pub f_max: f64,
    pub points: usize,
    #[serde(default)]
    pub spacing: Spacing,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_clock")]
    pub clock_hz: f64,
    #[serde(default = "default_transimpedance")]
    pub transimpedance: f64,
}

fn default_sample_count() -> usize {
    DEFAULT_SAMPLE_COUNT
}
fn default_amplitude() -> f64 {
    0.1
}
fn default_clock() -> f64 {
    DEFAULT_CLOCK_HZ
}
fn default_transimpedance() -> f64 {
    1.0
}

impl SweepSpec {
    pub fn new(f_min: f64, f_max: f64, points: usize, spacing: Spacing) -> Self {
        SweepSpec {
            f_min,
            f_max,
            points,
            spacing,
            sample_count: DEFAULT_SAMPLE_COUNT,
            amplitude: default_amplitude(),
            clock_hz: DEFAULT_CLOCK_HZ,
            transimpedance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), FraError> {
        for f in [self.f_min, self.f_max] {
            if !(MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&f) {
                return Err(FraError::FrequencyOutOfRange(f));
            }
        }
        if self.f_min >= self.f_max {
            return Err(FraError::BadSweep(format!(
                "f_min {} Hz must be below f_max {} Hz",
                self.f_min, self.f_max
            )));
        }
        if self.points < 2 {
            return Err(FraError::BadSweep(format!("need at least 2 points, got {}", self.points)));
        }
        if !(MIN_AMPLITUDE_V..=MAX_AMPLITUDE_V).contains(&self.amplitude) {
            return Err(FraError::AmplitudeOutOfRange(self.amplitude));
        }
        if !(self.transimpedance > 0.0) {
            return Err(FraError::BadSweep("transimpedance must be positive".into()));
        }
        Ok(())
    }

    /// Requested (unsnapped) frequencies.
    pub fn frequencies(&self) -> Vec<f64> {
        let last = (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                let t = i as f64 / last;
                match self.spacing {
                    Spacing::Linear => self.f_min + t * (self.f_max - self.f_min),
                    Spacing::Logarithmic => self.f_min * (self.f_max / self.f_min).powf(t),
                }
            })
            .map(|f| f.clamp(self.f_min, self.f_max))
            .collect()
    }

    pub fn plans(&self) -> Result<Vec<PeriodStablePlan>, FraError> {
        self.validate()?;
        let mut plans = self
            .frequencies()
            .into_iter()
            .map(|f| plan_frequency(f, self.sample_count, self.clock_hz))
            .collect::<Result<Vec<_>, _>>()?;
        plans.sort_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz));
        Ok(plans)
    }
}

pub type SourceError = Box<dyn StdError + Send + Sync>;

/// Anything that answers an excitation with a response buffer: the tissue
/// simulator, a replayed recording, or a hardware front end.
pub trait ResponseSource {
    fn respond(&mut self, excitation: &ExcitationWaveform) -> Result<ResponseBuffer, SourceError>;
}

impl<F> ResponseSource for F
where
    F: FnMut(&ExcitationWaveform) -> Result<ResponseBuffer, SourceError>,
{
    fn respond(&mut self, excitation: &ExcitationWaveform) -> Result<ResponseBuffer, SourceError> {
        self(excitation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub requested_hz: f64,
    pub analysis: ImpedanceAnalysis,
}

impl SweepPoint {
    pub fn snap_error_hz(&self) -> f64 {
        self.analysis.frequency - self.requested_hz
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] FraError),
    #[error("response source failed at {frequency_hz} Hz after {} points: {cause}", completed.len())]
    Source { completed: Vec<SweepPoint>, frequency_hz: f64, cause: SourceError },
    #[error("analysis failed at {frequency_hz} Hz after {} points: {cause}", completed.len())]
    Analysis { completed: Vec<SweepPoint>, frequency_hz: f64, cause: FraError },
}

impl SweepError {
    /// Points measured before the failure.
    pub fn partial(&self) -> &[SweepPoint] {
        match self {
            SweepError::Config(_) => &[],
            SweepError::Source { completed, .. } | SweepError::Analysis { completed, .. } => {
                completed
            }
        }
    }
}

pub fn run_sweep(
    spec: &SweepSpec,
    source: &mut dyn ResponseSource,
) -> Result<Vec<SweepPoint>, SweepError> {
    let plans = spec.plans()?;
    let mut out = Vec::with_capacity(plans.len());
    for plan in plans {
        let excitation = ExcitationWaveform::from_plan(&plan, spec.amplitude)?;
        let response = match source.respond(&excitation) {
            Ok(r) => r,
            Err(cause) => {
                return Err(SweepError::Source {
                    completed: out,
                    frequency_hz: plan.frequency_hz,
                    cause,
                })
            }
        };
        match analyze_pair(&excitation, &response, spec.transimpedance) {
            Ok(analysis) => out.push(SweepPoint { requested_hz: plan.requested_hz, analysis }),
            Err(cause) => {
                return Err(SweepError::Analysis {
                    completed: out,
                    frequency_hz: plan.frequency_hz,
                    cause,
                })
            }
        }
    }
    Ok(out)
}

pub const SWEEP_CSV_HEADER: &str = "frequency_hz,re,im,magnitude,phase_deg,vi_rms,vv_rms,m_rms,c,p_c";

pub fn write_sweep_csv<W: Write>(mut out: W, points: &[ImpedanceAnalysis]) -> io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for a in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            a.frequency, a.re, a.im, a.magnitude, a.phase_deg, a.vi_rms, a.vv_rms, a.m_rms, a.c,
            a.p_c
        )?;
    }
    Ok(())
}

/// Harmonic amplitudes of a period-stable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeSpectrum {
    /// `(harmonic index, amplitude)`, index 1 is the fundamental.
    pub harmonics: Vec<(usize, f64)>,
    /// Requested harmonics at or above Nyquist were dropped.
    pub truncated: bool,
}

impl ScopeSpectrum {
    pub fn amplitude(&self, harmonic: usize) -> Option<f64> {
        self.harmonics.iter().find(|(h, _)| *h == harmonic).map(|(_, a)| *a)
    }

    /// Total harmonic distortion: RMS of harmonics 2.. over the fundamental.
    pub fn thd(&self) -> Option<f64> {
        let fundamental = self.amplitude(1)?;
        if fundamental == 0.0 {
            return None;
        }
        let rest: f64 = self.harmonics.iter().filter(|(h, _)| *h > 1).map(|(_, a)| a * a).sum();
        Some(rest.sqrt() / fundamental)
    }
}

/// Amplitude of the fundamental (at `fundamental_cycles` per buffer) and of
/// harmonics 2..=`max_harmonic`, each from its own single-point DFT.
pub fn scope_spectrum(
    samples: &[f64],
    fundamental_cycles: usize,
    max_harmonic: usize,
) -> Result<ScopeSpectrum, FraError> {
    let n = samples.len();
    if n == 0 {
        return Err(FraError::EmptyBuffer);
    }
    if fundamental_cycles == 0 || 2 * fundamental_cycles >= n {
        return Err(FraError::BadCycles { cycles: fundamental_cycles, n });
    }
    let mut harmonics = Vec::with_capacity(max_harmonic);
    let mut truncated = false;
    for h in 1..=max_harmonic.max(1) {
        let bin = h * fundamental_cycles;
        if 2 * bin >= n {
            truncated = true;
            log::warn!("harmonic {h} (bin {bin}) is at or above Nyquist for N={n}; truncated");
            break;
        }
        let c = fra_single_point(samples, bin)?;
        harmonics.push((h, 2.0 * c.magnitude()));
    }
    Ok(ScopeSpectrum { harmonics, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine(n: usize, cycles: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|k| amp * (2.0 * PI * (cycles * k) as f64 / n as f64).cos()).collect()
    }

    fn sine(n: usize, cycles: usize, amp: f64, phase_deg: f64) -> Vec<f64> {
        let ph = phase_deg.to_radians();
        (0..n).map(|k| amp * (2.0 * PI * (cycles * k) as f64 / n as f64 + ph).sin()).collect()
    }

    #[test]
    fn synthesize_examples() {
        let w = ExcitationWaveform::synthesize(100.0, 0.1, 1000, 100_000.0).unwrap();
        assert_eq!(w.cycles(), 1);
        assert_eq!(w.len(), 1000);
        let peak = w.samples().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((peak - 0.1).abs() < 1e-15);
        assert!(matches!(
            ExcitationWaveform::synthesize(100.5, 0.1, 1000, 100_000.0),
            Err(FraError::NotPeriodStable { .. })
        ));
        assert!(ExcitationWaveform::synthesize(8.0, 1.0, 4000, 32_000.0).is_ok());
    }

    #[test]
    fn synthesize_rejects_out_of_range() {
        assert!(matches!(
            ExcitationWaveform::synthesize(7.0, 0.1, 7000, 7000.0),
            Err(FraError::FrequencyOutOfRange(_))
        ));
        assert!(matches!(
            ExcitationWaveform::synthesize(100.0, 1.5, 1000, 100_000.0),
            Err(FraError::AmplitudeOutOfRange(_))
        ));
        // 500 cycles in 1000 samples sits exactly on Nyquist
        assert!(matches!(
            ExcitationWaveform::synthesize(50_000.0, 0.1, 1000, 100_000.0),
            Err(FraError::AboveNyquist { .. })
        ));
    }

    #[test]
    fn fra_examples() {
        let n = 1024;
        let c = fra_single_point(&vec![1.0; n], 1).unwrap();
        assert!(c.re.abs() < 1e-15 && c.im.abs() < 1e-15);

        let c = fra_single_point(&cosine(n, 1, 2.0), 1).unwrap();
        assert!((c.re - 1.0).abs() < 1e-14 && c.im.abs() < 1e-14);

        let c = fra_single_point(&sine(n, 1, 2.0, 0.0), 1).unwrap();
        assert!(c.re.abs() < 1e-14 && (c.im + 1.0).abs() < 1e-14);
    }

    #[test]
    fn fra_rejects_bad_input() {
        assert_eq!(fra_single_point(&[], 1), Err(FraError::EmptyBuffer));
        assert_eq!(fra_single_point(&[1.0], 1), Err(FraError::TooShort(1)));
        assert!(matches!(fra_single_point(&[0.0; 8], 4), Err(FraError::BadCycles { .. })));
        assert!(matches!(fra_single_point(&[0.0; 8], 0), Err(FraError::BadCycles { .. })));
    }

    #[test]
    fn magnitude_phase_examples() {
        let (m, p) = magnitude_phase(ComplexResponse { re: 3.0, im: 4.0 });
        assert_eq!(m, 5.0);
        assert!((p.unwrap() - 53.130_102_354_155_98).abs() < 1e-9);
        assert_eq!(magnitude_phase(ComplexResponse { re: 1.0, im: 0.0 }), (1.0, Some(0.0)));
        assert_eq!(magnitude_phase(ComplexResponse { re: 0.0, im: -1.0 }), (1.0, Some(-90.0)));
        assert_eq!(magnitude_phase(ComplexResponse { re: 0.0, im: 0.0 }), (0.0, None));
        // negative real axis maps to +180, never -180
        assert_eq!(magnitude_phase(ComplexResponse { re: -1.0, im: -0.0 }).1, Some(180.0));
    }

    #[test]
    fn rms_examples() {
        assert!((rms(&[-3.0; 10]).unwrap() - 3.0).abs() < 1e-15);
        let s = sine(1000, 7, 2.0, 0.0);
        assert!((rms(&s).unwrap() - 2.0 / 2f64.sqrt()).abs() < 1e-13);
        assert_eq!(rms(&[0.0; 5]).unwrap(), 0.0);
        assert_eq!(rms(&[]), Err(FraError::EmptyBuffer));
    }

    #[test]
    fn rms_resistivity_examples() {
        assert_eq!(rms_resistivity(1.0, 0.5).unwrap(), 2.0);
        assert_eq!(rms_resistivity(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(rms_resistivity(1.0, 0.0), Err(FraError::OpenCircuit));
    }

    #[test]
    fn lockin_examples() {
        let n = 1000;
        let a = sine(n, 5, 2f64.sqrt(), 0.0);
        let q = sine(n, 5, 2f64.sqrt(), 90.0);
        let inv = sine(n, 5, 2f64.sqrt(), 180.0);
        assert!((lockin_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-13);
        assert!(lockin_correlation(&a, &q).unwrap().abs() < 1e-13);
        assert!((lockin_correlation(&a, &inv).unwrap() + 1.0).abs() < 1e-13);
        assert_eq!(lockin_correlation(&a, &a[1..]), Err(FraError::LengthMismatch(1000, 999)));

        let p = lockin_phase(1.0, 1.0, 1.0).unwrap();
        assert_eq!(p.p_c, 0.0);
        assert!((lockin_phase(0.0, 1.0, 1.0).unwrap().p_c - 90.0).abs() < 1e-12);
        assert_eq!(lockin_phase(0.5, 0.0, 1.0), Err(FraError::OpenCircuit));
        // excess from rounding is clamped rather than producing NaN
        assert_eq!(lockin_phase(1.0 + 1e-15, 1.0, 1.0).unwrap().p_c, 0.0);
    }

    #[test]
    fn lockin_phase_thirty_degrees_any_amplitude() {
        let n = 1024;
        for (a1, a2) in [(1.0, 1.0), (0.003, 7.5), (12.0, 0.2)] {
            let vv = sine(n, 3, a1, 0.0);
            let vi = sine(n, 3, a2, 30.0);
            // brute-force evaluation of correlation and normalization
            let c: f64 = vv.iter().zip(&vi).map(|(x, y)| x * y).sum::<f64>() / n as f64;
            let rv = (vv.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            let ri = (vi.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            let p = lockin_phase(c, ri, rv).unwrap();
            assert!((p.p_c - 30.0).abs() < 0.01, "{a1} {a2}: {}", p.p_c);
        }
    }

    #[test]
    fn analyze_pair_pure_resistor() {
        let vv = ExcitationWaveform::synthesize(1000.0, 0.1, 1000, 100_000.0).unwrap();
        let r = 10_000.0;
        let vi = ResponseBuffer {
            frequency: 1000.0,
            sample_rate: 100_000.0,
            samples: vv.samples().iter().map(|v| v / r).collect(),
        };
        let a = analyze_pair(&vv, &vi, 1.0).unwrap();
        assert!((a.m_rms - r).abs() / r < 1e-12);
        assert!((a.magnitude - r).abs() / r < 1e-12);
        assert!(a.phase_deg.abs() < 1e-9);
        assert!(a.p_c.abs() < 1e-4);
    }

    #[test]
    fn analyze_pair_applies_transimpedance() {
        let vv = ExcitationWaveform::synthesize(1000.0, 0.1, 1000, 100_000.0).unwrap();
        let vi = ResponseBuffer {
            frequency: 1000.0,
            sample_rate: 100_000.0,
            samples: vv.samples().iter().map(|v| v * 0.5).collect(),
        };
        let a = analyze_pair(&vv, &vi, 1000.0).unwrap();
        assert!((a.m_rms - 2000.0).abs() < 1e-9);
        assert!((a.magnitude - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn analyze_pair_errors() {
        let vv = ExcitationWaveform::synthesize(1000.0, 0.1, 1000, 100_000.0).unwrap();
        let zero =
            ResponseBuffer { frequency: 1000.0, sample_rate: 100_000.0, samples: vec![0.0; 1000] };
        assert_eq!(analyze_pair(&vv, &zero, 1.0), Err(FraError::OpenCircuit));
        let short =
            ResponseBuffer { frequency: 1000.0, sample_rate: 100_000.0, samples: vec![1.0; 10] };
        assert!(matches!(analyze_pair(&vv, &short, 1.0), Err(FraError::LengthMismatch(..))));
    }

    #[test]
    fn plan_snaps_to_integer_cycles() {
        for f in [8.0, 15.9, 500.0, 1234.5, 300_000.0, 650_000.0] {
            let p = plan_frequency(f, 1024, DEFAULT_CLOCK_HZ).unwrap();
            let cycles = p.frequency_hz * 1024.0 / p.sample_rate;
            assert!((cycles - p.cycles as f64).abs() < 1e-9);
            assert!(2 * p.cycles < 1024);
            assert!(p.snap_error_hz().abs() / f < 1e-3, "{f}: {p:?}");
            ExcitationWaveform::from_plan(&p, 0.1).unwrap();
        }
        let p = plan_frequency(500.0, 1024, DEFAULT_CLOCK_HZ).unwrap();
        assert_eq!(p.frequency_hz, 500.0);
        assert!(plan_frequency(5.0, 1024, DEFAULT_CLOCK_HZ).is_err());
    }

    #[test]
    fn sweep_spec_validation() {
        assert!(SweepSpec::new(1000.0, 100.0, 10, Spacing::Linear).validate().is_err());
        assert!(SweepSpec::new(100.0, 100.0, 10, Spacing::Linear).validate().is_err());
        assert!(SweepSpec::new(100.0, 1000.0, 1, Spacing::Linear).validate().is_err());
        assert!(SweepSpec::new(1.0, 1000.0, 3, Spacing::Linear).validate().is_err());
        let f = SweepSpec::new(100.0, 1000.0, 2, Spacing::Linear).frequencies();
        assert_eq!(f, vec![100.0, 1000.0]);
        let f = SweepSpec::new(10.0, 1000.0, 3, Spacing::Logarithmic).frequencies();
        assert!((f[1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_reports_partial_results() {
        let spec = SweepSpec::new(100.0, 10_000.0, 5, Spacing::Logarithmic);
        let mut calls = 0;
        let mut source = |ex: &ExcitationWaveform| -> Result<ResponseBuffer, SourceError> {
            calls += 1;
            if calls == 4 {
                return Err("electrode disconnected".into());
            }
            Ok(ResponseBuffer {
                frequency: ex.frequency(),
                sample_rate: ex.sample_rate(),
                samples: ex.samples().iter().map(|v| v / 50.0).collect(),
            })
        };
        let err = run_sweep(&spec, &mut source).unwrap_err();
        assert_eq!(err.partial().len(), 3);
        assert!(err.to_string().contains("electrode disconnected"));
        assert!(err.partial().iter().all(|p| (p.analysis.magnitude - 50.0).abs() < 1e-9));
    }

    #[test]
    fn sweep_endpoints_only() {
        let spec = SweepSpec::new(100.0, 10_000.0, 2, Spacing::Linear);
        let mut source = |ex: &ExcitationWaveform| -> Result<ResponseBuffer, SourceError> {
            Ok(ResponseBuffer {
                frequency: ex.frequency(),
                sample_rate: ex.sample_rate(),
                samples: ex.samples().to_vec(),
            })
        };
        let pts = run_sweep(&spec, &mut source).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].requested_hz, 100.0);
        assert_eq!(pts[1].requested_hz, 10_000.0);
    }

    #[test]
    fn sweep_csv_format() {
        let vv = ExcitationWaveform::synthesize(1000.0, 0.1, 1000, 100_000.0).unwrap();
        let vi = ResponseBuffer {
            frequency: 1000.0,
            sample_rate: 100_000.0,
            samples: vv.samples().iter().map(|v| v * 0.25).collect(),
        };
        let a = analyze_pair(&vv, &vi, 1.0).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[a]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.split('\n');
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER);
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(row.len(), 10);
        assert_eq!(row[0], 1000.0);
        assert_eq!(row[3], a.magnitude);
        assert!(!text.contains('\r'));
    }

    // Brute-force O(N) DFT of a single bin in the plain textbook form.
    fn dft_bin(x: &[f64], bin: usize) -> (f64, f64) {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (k, v) in x.iter().enumerate() {
            let a = -2.0 * PI * bin as f64 * k as f64 / n;
            re += v * a.cos();
            im += v * a.sin();
        }
        (re / n, im / n)
    }

    #[test]
    fn scope_pure_sine() {
        let s = sine(1024, 4, 1.0, 0.0);
        let sp = scope_spectrum(&s, 4, 10).unwrap();
        assert!(!sp.truncated);
        assert!((sp.amplitude(1).unwrap() - 1.0).abs() < 1e-12);
        for h in 2..=10 {
            assert!(sp.amplitude(h).unwrap() < 1e-9);
        }
    }

    #[test]
    fn scope_third_harmonic_ratio() {
        let n = 1024;
        let s: Vec<f64> = sine(n, 4, 1.0, 0.0)
            .iter()
            .zip(sine(n, 12, 0.1, 0.0))
            .map(|(a, b)| a + b)
            .collect();
        let (r1, i1) = dft_bin(&s, 4);
        let (r3, i3) = dft_bin(&s, 12);
        let oracle = r3.hypot(i3) / r1.hypot(i1);
        assert!((oracle - 0.1).abs() < 1e-9);
        let sp = scope_spectrum(&s, 4, 5).unwrap();
        let ratio = sp.amplitude(3).unwrap() / sp.amplitude(1).unwrap();
        assert!((ratio - oracle).abs() < 1e-9);
        assert!((sp.thd().unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn scope_clipped_sine_has_odd_harmonics() {
        let n = 1024;
        let s: Vec<f64> = sine(n, 8, 1.0, 0.0).iter().map(|x| x.clamp(-0.6, 0.6)).collect();
        let sp = scope_spectrum(&s, 8, 7).unwrap();
        for h in [3, 5, 7] {
            let (r, i) = dft_bin(&s, 8 * h);
            let oracle = 2.0 * r.hypot(i);
            assert!(oracle > 1e-3);
            assert!((sp.amplitude(h).unwrap() - oracle).abs() < 1e-9);
        }
        for h in [2, 4, 6] {
            assert!(sp.amplitude(h).unwrap() < 1e-9);
        }
    }

    #[test]
    fn scope_truncates_at_nyquist() {
        let s = sine(64, 10, 1.0, 0.0);
        let sp = scope_spectrum(&s, 10, 8).unwrap();
        assert!(sp.truncated);
        assert_eq!(sp.harmonics.len(), 3);
    }

    proptest! {
        #[test]
        fn single_bin_never_exceeds_rms_bound(
            xs in prop::collection::vec(-5.0f64..5.0, 8..256),
            c in 1usize..4,
        ) {
            prop_assume!(2 * c < xs.len());
            let m = fra_single_point(&xs, c).unwrap().magnitude();
            prop_assert!(m <= rms(&xs).unwrap() * 2f64.sqrt() + 1e-12);
        }

        #[test]
        fn correlation_is_symmetric_and_linear(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..128),
            a in -10.0f64..10.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let cxy = lockin_correlation(&x, &y).unwrap();
            prop_assert_eq!(cxy, lockin_correlation(&y, &x).unwrap());
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            let lhs = lockin_correlation(&ax, &y).unwrap();
            prop_assert!((lhs - a * cxy).abs() <= 1e-9 * (1.0 + (a * cxy).abs()));
        }

        #[test]
        fn lockin_phase_is_scale_invariant(
            phase in 0.0f64..180.0,
            s1 in 0.01f64..100.0,
            s2 in 0.01f64..100.0,
        ) {
            let n = 256;
            let vv = sine(n, 3, 1.0, 0.0);
            let vi = sine(n, 3, 1.0, phase);
            let base = {
                let c = lockin_correlation(&vi, &vv).unwrap();
                lockin_phase(c, rms(&vi).unwrap(), rms(&vv).unwrap()).unwrap().p_c
            };
            let vv2: Vec<f64> = vv.iter().map(|v| v * s1).collect();
            let vi2: Vec<f64> = vi.iter().map(|v| v * s2).collect();
            let c = lockin_correlation(&vi2, &vv2).unwrap();
            let scaled = lockin_phase(c, rms(&vi2).unwrap(), rms(&vv2).unwrap()).unwrap().p_c;
            prop_assert!((scaled - base).abs() < 1e-5);
        }
    }
}
