//! Deterministic plant and electrode simulator.
//!
//! Stands in for the physical device: tissue impedance responses to an
//! excitation buffer, biopotential dynamics with stimulus-evoked action and
//! variation potentials, and the environmental sensor channels. All noise is
//! drawn from ChaCha8 streams keyed by `(seed, channel, timestamp)`, so any
//! query is a pure function of its arguments and the injected event list.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fra::{ExcitationWaveform, ResponseBuffer, ResponseSource, SourceError};
use crate::types::{ChannelGroup, ChannelId, ChannelKind, Record, TimestampMs, TypesError};

/// LM35 transfer function, volts per °C.
pub const LM35_V_PER_C: f64 = 0.01;
/// 22-bit ADC over a 2 V span.
pub const EXT_ADC_STEP_V: f64 = 2.0 / (1u64 << 22) as f64;
/// Temperature step of the LM35 channel (ADC step / 10 mV per °C), ≈ 4.77e-5 °C.
pub const LM35_STEP_C: f64 = 100.0 / (1u64 << 21) as f64;

const MS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("frequency must be positive, got {0} Hz")]
    BadFrequency(f64),
    #[error("invalid tissue model: {0}")]
    BadTissue(String),
    #[error("invalid biopotential profile: {0}")]
    BadProfile(String),
    #[error("stimulus intensity {0} is outside [0, 1]")]
    BadIntensity(f64),
    #[error("unknown stimulus kind `{0}`")]
    UnknownStimulus(String),
    #[error(transparent)]
    Digitize(#[from] TypesError),
}

/// Series resistance plus a parallel RC branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueModel {
    pub r_series: f64,
    pub r_parallel: f64,
    /// Zero gives a purely resistive parallel branch.
    pub c_parallel: f64,
    #[serde(default)]
    pub noise_rms: f64,
}

impl Default for TissueModel {
    fn default() -> Self {
        TissueModel { r_series: 1_000.0, r_parallel: 10_000.0, c_parallel: 1e-6, noise_rms: 0.0 }
    }
}

impl TissueModel {
    pub fn resistor(ohms: f64) -> Self {
        TissueModel { r_series: ohms, r_parallel: 0.0, c_parallel: 0.0, noise_rms: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(self.r_series > 0.0 && self.r_series.is_finite()) {
            return Err(SimError::BadTissue(format!("r_series {} must be > 0", self.r_series)));
        }
        if !ok(self.r_parallel) || !ok(self.c_parallel) || !ok(self.noise_rms) {
            return Err(SimError::BadTissue(
                "r_parallel, c_parallel and noise_rms must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form `Z(f) = Rs + Rp / (1 + j·2πf·Rp·Cp)`.
    pub fn analytic_impedance(&self, frequency: f64) -> Result<Complex64, SimError> {
        if !(frequency > 0.0 && frequency.is_finite()) {
            return Err(SimError::BadFrequency(frequency));
        }
        let w = 2.0 * PI * frequency;
        let branch = Complex64::new(self.r_parallel, 0.0)
            / Complex64::new(1.0, w * self.r_parallel * self.c_parallel);
        Ok(Complex64::new(self.r_series, 0.0) + branch)
    }

    fn with_parallel_scale(mut self, scale: f64) -> Self {
        self.r_parallel *= scale;
        self
    }
}

/// Steady-state current through `model` driven by `excitation`, in amperes
/// (a 1 Ω transimpedance), plus seeded Gaussian noise.
pub fn tissue_response(
    model: &TissueModel,
    excitation: &ExcitationWaveform,
    seed: u64,
) -> Result<ResponseBuffer, SimError> {
    model.validate()?;
    let z = model.analytic_impedance(excitation.frequency())?;
    let y = z.inv();
    let (gain, phase) = (y.norm(), y.arg());
    let n = excitation.len();
    let step = 2.0 * PI * excitation.cycles() as f64 / n as f64;
    let amp = excitation.amplitude() * gain;
    let mut samples: Vec<f64> = (0..n).map(|k| amp * (step * k as f64 + phase).sin()).collect();
    if model.noise_rms > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, model.noise_rms).expect("finite sigma");
        for s in &mut samples {
            *s += normal.sample(&mut rng);
        }
    }
    Ok(ResponseBuffer {
        frequency: excitation.frequency(),
        sample_rate: excitation.sample_rate(),
        samples,
    })
}

/// Tissue model answering excitations with fresh noise per call.
#[derive(Debug, Clone)]
pub struct TissueResponder {
    pub model: TissueModel,
    seed: u64,
    calls: u64,
}

impl TissueResponder {
    pub fn new(model: TissueModel, seed: u64) -> Self {
        TissueResponder { model, seed, calls: 0 }
    }
}

impl ResponseSource for TissueResponder {
    fn respond(&mut self, excitation: &ExcitationWaveform) -> Result<ResponseBuffer, SourceError> {
        let seed = mix(self.seed, STREAM_TISSUE, self.calls as i64);
        self.calls += 1;
        Ok(tissue_response(&self.model, excitation, seed)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StimulusKind {
    Touch,
    Light,
    Electrical,
    Irrigation,
}

impl StimulusKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StimulusKind::Touch => "touch",
            StimulusKind::Light => "light",
            StimulusKind::Electrical => "electrical",
            StimulusKind::Irrigation => "irrigation",
        }
    }
}

impl fmt::Display for StimulusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StimulusKind {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "touch" => Ok(StimulusKind::Touch),
            "light" => Ok(StimulusKind::Light),
            "electrical" => Ok(StimulusKind::Electrical),
            "irrigation" => Ok(StimulusKind::Irrigation),
            other => Err(SimError::UnknownStimulus(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub kind: StimulusKind,
    pub time_ms: TimestampMs,
    pub intensity: f64,
}

impl StimulusEvent {
    pub fn new(kind: StimulusKind, time_ms: TimestampMs, intensity: f64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&intensity) {
            return Err(SimError::BadIntensity(intensity));
        }
        Ok(StimulusEvent { kind, time_ms, intensity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiopotentialProfile {
    pub baseline: f64,
    /// Volts per hour.
    pub drift_rate: f64,
    pub diurnal_amplitude: f64,
    /// Hours.
    pub diurnal_period: f64,
    pub ap_amplitude: f64,
    /// Seconds.
    pub ap_duration: f64,
    pub vp_amplitude: f64,
    /// Seconds.
    pub vp_duration: f64,
    pub noise_rms: f64,
    pub seed: u64,
}

impl Default for BiopotentialProfile {
    fn default() -> Self {
        BiopotentialProfile {
            baseline: 0.010,
            drift_rate: 1e-4,
            diurnal_amplitude: 0.002,
            diurnal_period: 24.0,
            ap_amplitude: 0.002,
            ap_duration: 2.0,
            vp_amplitude: 0.003,
            vp_duration: 120.0,
            noise_rms: 20e-6,
            seed: 0,
        }
    }
}

impl BiopotentialProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.ap_duration > 0.0 && self.vp_duration > 0.0 && self.diurnal_period > 0.0) {
            return Err(SimError::BadProfile("durations and period must be > 0".into()));
        }
        if self.ap_duration >= self.vp_duration {
            return Err(SimError::BadProfile(format!(
                "ap_duration {} s must be shorter than vp_duration {} s",
                self.ap_duration, self.vp_duration
            )));
        }
        if !(self.noise_rms >= 0.0) {
            return Err(SimError::BadProfile("noise_rms must be >= 0".into()));
        }
        Ok(())
    }
}

/// Biphasic raised-cosine action potential on `s ∈ [0, 1)` (fraction of
/// the AP duration): a positive lobe over the first 3/4, then a shallow
/// undershoot of 30 %.
pub fn ap_kernel(s: f64) -> f64 {
    const SPLIT: f64 = 0.75;
    const UNDERSHOOT: f64 = 0.3;
    if !(0.0..1.0).contains(&s) {
        0.0
    } else if s < SPLIT {
        0.5 * (1.0 - (2.0 * PI * s / SPLIT).cos())
    } else {
        -UNDERSHOOT * 0.5 * (1.0 - (2.0 * PI * (s - SPLIT) / (1.0 - SPLIT)).cos())
    }
}

/// Unit-peak alpha function `x·e^(1−x)` with `x = dt / τ`, `τ = vp_duration / 4`.
pub fn vp_kernel(dt_s: f64, vp_duration: f64) -> f64 {
    if dt_s < 0.0 {
        return 0.0;
    }
    let x = dt_s / (vp_duration / 4.0);
    x * (1.0 - x).exp()
}

fn event_kernel(profile: &BiopotentialProfile, ev: &StimulusEvent, t_ms: TimestampMs) -> f64 {
    if ev.time_ms > t_ms {
        return 0.0;
    }
    let dt = (t_ms - ev.time_ms) as f64 / 1000.0;
    let ap = profile.ap_amplitude * ap_kernel(dt / profile.ap_duration);
    let vp = profile.vp_amplitude * vp_kernel(dt, profile.vp_duration);
    ev.intensity
        * match ev.kind {
            StimulusKind::Touch => ap + vp,
            StimulusKind::Light => 0.5 * vp,
            StimulusKind::Electrical => vp,
            StimulusKind::Irrigation => 0.0,
        }
}

/// Noise-free biopotential trajectory at `t_ms`.
pub fn quiescent_biopotential(
    profile: &BiopotentialProfile,
    start_ms: TimestampMs,
    t_ms: TimestampMs,
) -> f64 {
    let hours = (t_ms - start_ms) as f64 / MS_PER_HOUR;
    profile.baseline
        + profile.drift_rate * hours
        + profile.diurnal_amplitude * (2.0 * PI * hours / profile.diurnal_period).sin()
}

/// Biopotential in volts: baseline, drift, diurnal wave, event kernels and
/// seeded noise. Events after `t_ms` have no effect.
pub fn biopotential_at(
    profile: &BiopotentialProfile,
    start_ms: TimestampMs,
    t_ms: TimestampMs,
    events: &[StimulusEvent],
) -> f64 {
    biopotential_channel(profile, start_ms, t_ms, events, 0)
}

fn biopotential_channel(
    profile: &BiopotentialProfile,
    start_ms: TimestampMs,
    t_ms: TimestampMs,
    events: &[StimulusEvent],
    channel: u64,
) -> f64 {
    // the second electrode sits further from the stimulus site
    let coupling = if channel == 0 { 1.0 } else { 0.8 };
    let evoked: f64 = events.iter().map(|e| event_kernel(profile, e, t_ms)).sum();
    let mut v = quiescent_biopotential(profile, start_ms, t_ms) + coupling * evoked;
    if profile.noise_rms > 0.0 {
        v += gaussian(profile.seed, STREAM_BIO + channel, t_ms, profile.noise_rms);
    }
    v
}

const STREAM_TISSUE: u64 = 0x7155_0000;
const STREAM_BIO: u64 = 0xB10_0000;
const STREAM_ENV: u64 = 0xE4F_0000;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, stream: u64, t_ms: i64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ t_ms as u64)
}

fn gaussian(seed: u64, stream: u64, t_ms: i64, sigma: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stream, t_ms));
    Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng)
}

/// Environmental sensor model: diurnal curves plus small seeded noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvironmentModel {
    pub utc_offset_hours: f64,
    pub air_temp_mean: f64,
    pub air_temp_swing: f64,
    pub humidity_mean: f64,
    pub humidity_swing: f64,
    pub light_peak_lux: f64,
    pub pressure_hpa: f64,
    pub object_temp_c: f64,
    /// Multiplies every channel's noise; 0 gives noise-free curves.
    pub noise_scale: f64,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        EnvironmentModel {
            utc_offset_hours: 0.0,
            air_temp_mean: 20.0,
            air_temp_swing: 5.0,
            humidity_mean: 60.0,
            humidity_swing: 15.0,
            light_peak_lux: 20_000.0,
            pressure_hpa: 1013.25,
            object_temp_c: 24.0,
            noise_scale: 1.0,
        }
    }
}

/// Digitize an LM35 reading: 10 mV/°C into a 22-bit ADC, back to °C.
pub fn lm35_read(true_celsius: f64) -> f64 {
    let volts = true_celsius * LM35_V_PER_C;
    let code = (volts / EXT_ADC_STEP_V).round();
    code * LM35_STEP_C
}

fn axis_of(name: &str) -> usize {
    if name.ends_with('y') {
        1
    } else if name.ends_with('z') {
        2
    } else {
        0
    }
}

impl EnvironmentModel {
    fn hour_of_day(&self, t_ms: TimestampMs) -> f64 {
        let h = t_ms as f64 / MS_PER_HOUR + self.utc_offset_hours;
        h.rem_euclid(24.0)
    }

    fn daylight(&self, hour: f64) -> f64 {
        if (6.0..=18.0).contains(&hour) {
            (PI * (hour - 6.0) / 12.0).sin().max(0.0)
        } else {
            0.0
        }
    }

    /// Noise-free physical value of one environmental channel.
    pub fn clean_value(
        &self,
        kind: ChannelKind,
        axis: usize,
        t_ms: TimestampMs,
        events: &[StimulusEvent],
    ) -> f64 {
        let h = self.hour_of_day(t_ms);
        let warm = (2.0 * PI * (h - 14.0) / 24.0).cos();
        let sun = self.daylight(h);
        let irrigation = |tau_h: f64| -> f64 {
            events
                .iter()
                .filter(|e| e.kind == StimulusKind::Irrigation && e.time_ms <= t_ms)
                .map(|e| e.intensity * (-((t_ms - e.time_ms) as f64 / MS_PER_HOUR) / tau_h).exp())
                .sum()
        };
        match kind {
            ChannelKind::AirTemperature => self.air_temp_mean + self.air_temp_swing * warm,
            ChannelKind::AirHumidity => self.humidity_mean - self.humidity_swing * warm,
            ChannelKind::Light => self.light_peak_lux * sun,
            ChannelKind::SoilTemperature => {
                18.0 + 1.5 * (2.0 * PI * (h - 16.0) / 24.0).cos()
            }
            ChannelKind::SoilMoisture => 35.0 + 10.0 * irrigation(6.0),
            ChannelKind::Transpiration => 5.0 + 40.0 * sun,
            ChannelKind::SapFlow => 10.0 + 30.0 * sun + 5.0 * irrigation(2.0),
            ChannelKind::AirPressure => self.pressure_hpa,
            ChannelKind::MagnetometerXyz => [20e-6, 1e-6, 45e-6][axis],
            ChannelKind::AccelerometerXyz => [0.0, 0.0, 9.81][axis],
            ChannelKind::RfPower => -60.0,
            ChannelKind::ExternalTemperature => self.object_temp_c + 0.5 * warm,
            ChannelKind::Biopotential1
            | ChannelKind::Biopotential2
            | ChannelKind::Impedance1
            | ChannelKind::Impedance2 => 0.0,
        }
    }

    fn noise_sigma(kind: ChannelKind) -> f64 {
        match kind {
            ChannelKind::AirTemperature | ChannelKind::SoilTemperature => 0.02,
            ChannelKind::AirHumidity => 0.2,
            ChannelKind::Light => 5.0,
            ChannelKind::SoilMoisture | ChannelKind::Transpiration | ChannelKind::SapFlow => 0.05,
            ChannelKind::AirPressure => 0.05,
            ChannelKind::MagnetometerXyz => 5e-8,
            ChannelKind::AccelerometerXyz => 0.002,
            ChannelKind::RfPower => 0.5,
            ChannelKind::ExternalTemperature => 0.002,
            _ => 0.0,
        }
    }

    /// Digitized reading of an environmental channel.
    pub fn read(
        &self,
        channel: &ChannelId,
        seed: u64,
        t_ms: TimestampMs,
        events: &[StimulusEvent],
    ) -> Result<f64, SimError> {
        let axis = axis_of(&channel.name);
        let mut v = self.clean_value(channel.kind, axis, t_ms, events);
        let sigma = Self::noise_sigma(channel.kind) * self.noise_scale;
        if sigma > 0.0 {
            let stream = STREAM_ENV + ((channel.kind as u64) << 4) + axis as u64;
            v += gaussian(seed, stream, t_ms, sigma);
        }
        if channel.kind == ChannelKind::Light {
            v = v.max(0.0);
        }
        if channel.kind == ChannelKind::ExternalTemperature {
            v = lm35_read(v);
        }
        Ok(channel.kind.digitize(v)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleCall {
    pub t_ms: TimestampMs,
    pub channel: String,
    pub group: ChannelGroup,
}

/// Stateful simulator: holds the models and the event list. Event injection
/// is the only mutation; every query is pure given the current event list.
#[derive(Debug, Clone)]
pub struct PlantSimulator {
    pub tissue: TissueModel,
    pub profile: BiopotentialProfile,
    pub environment: EnvironmentModel,
    start_ms: TimestampMs,
    events: Vec<StimulusEvent>,
    call_log: Option<Vec<SampleCall>>,
}

impl PlantSimulator {
    pub fn new(
        tissue: TissueModel,
        profile: BiopotentialProfile,
        environment: EnvironmentModel,
        start_ms: TimestampMs,
    ) -> Result<Self, SimError> {
        tissue.validate()?;
        profile.validate()?;
        Ok(PlantSimulator {
            tissue,
            profile,
            environment,
            start_ms,
            events: Vec::new(),
            call_log: None,
        })
    }

    pub fn start_ms(&self) -> TimestampMs {
        self.start_ms
    }

    pub fn seed(&self) -> u64 {
        self.profile.seed
    }

    pub fn inject(&mut self, event: StimulusEvent) {
        let pos = self.events.partition_point(|e| e.time_ms <= event.time_ms);
        self.events.insert(pos, event);
    }

    pub fn events(&self) -> &[StimulusEvent] {
        &self.events
    }

    /// Record every channel read from now on.
    pub fn enable_call_log(&mut self) {
        self.call_log = Some(Vec::new());
    }

    pub fn take_call_log(&mut self) -> Vec<SampleCall> {
        self.call_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log_call(&mut self, t_ms: TimestampMs, channel: &ChannelId) {
        if let Some(log) = &mut self.call_log {
            log.push(SampleCall { t_ms, channel: channel.name.clone(), group: channel.kind.group() });
        }
    }

    /// Tissue model in effect at `t_ms`. Electrical stimulation lowers the
    /// parallel resistance by `10 % · intensity` for one VP duration.
    pub fn tissue_at(&self, t_ms: TimestampMs) -> TissueModel {
        let window_ms = (self.profile.vp_duration * 1000.0) as i64;
        let scale: f64 = self
            .events
            .iter()
            .filter(|e| {
                e.kind == StimulusKind::Electrical
                    && e.time_ms <= t_ms
                    && t_ms < e.time_ms + window_ms
            })
            .map(|e| 1.0 - 0.1 * e.intensity)
            .product();
        self.tissue.with_parallel_scale(scale)
    }

    /// Raw biopotential of electrode `index` (0 or 1).
    pub fn biopotential(&self, index: u64, t_ms: TimestampMs) -> f64 {
        biopotential_channel(&self.profile, self.start_ms, t_ms, &self.events, index)
    }

    /// Digitized reading of a voltage or environmental channel. Impedance
    /// channels go through [`PlantSimulator::impedance_response`].
    pub fn sample(&mut self, channel: &ChannelId, t_ms: TimestampMs) -> Result<f64, SimError> {
        self.log_call(t_ms, channel);
        match channel.kind {
            ChannelKind::Biopotential1 => Ok(channel.kind.digitize(self.biopotential(0, t_ms))?),
            ChannelKind::Biopotential2 => Ok(channel.kind.digitize(self.biopotential(1, t_ms))?),
            ChannelKind::Impedance1 | ChannelKind::Impedance2 => Ok(0.0),
            _ => self.environment.read(channel, self.profile.seed, t_ms, &self.events),
        }
    }

    /// Response of the tissue (as it is at `t_ms`) to one excitation buffer.
    pub fn impedance_response(
        &mut self,
        channel: &ChannelId,
        excitation: &ExcitationWaveform,
        t_ms: TimestampMs,
    ) -> Result<ResponseBuffer, SimError> {
        self.log_call(t_ms, channel);
        let stream = STREAM_TISSUE + channel.kind as u64;
        tissue_response(&self.tissue_at(t_ms), excitation, mix(self.profile.seed, stream, t_ms))
    }

    /// All environmental channels from `channels` at `t_ms`.
    pub fn environment_at(
        &self,
        channels: &[ChannelId],
        t_ms: TimestampMs,
    ) -> Result<Record, SimError> {
        let mut rec = Record::new(t_ms);
        for ch in channels.iter().filter(|c| c.kind.group() == ChannelGroup::Environment) {
            rec.insert(ch.name.clone(), self.environment.read(ch, self.profile.seed, t_ms, &self.events)?);
        }
        Ok(rec)
    }
}
