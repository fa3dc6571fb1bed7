//! Experiment and scenario files (TOML).
//!
//! Everything is validated here, before any record is written. Relative
//! paths are taken relative to the working directory of the process.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{build_bindings, ActuatorBinding, ActuatorKind, BindingConfig, BindingError};
use crate::detectors::{validate_detectors, DetectorConfig, DetectorError};
use crate::fra::{plan_frequency, FraError, PeriodStablePlan, SweepSpec, DEFAULT_CLOCK_HZ, DEFAULT_SAMPLE_COUNT, MAX_AMPLITUDE_V, MIN_AMPLITUDE_V};
use crate::pipeline::PipeCapacities;
use crate::sim::{BiopotentialProfile, EnvironmentModel, SimError, StimulusEvent, StimulusKind, TissueModel};
use crate::store::{StoreConfig, StoreError};
use crate::types::{build_schedule, AcquisitionSchedule, ScheduleConfig, TimestampMs, TypesError};

/// 2024-06-01T00:00:00Z, the default virtual start time.
pub const DEFAULT_START_MS: TimestampMs = 1_717_200_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Syntax(#[from] toml::de::Error),
    #[error("schedule: {0}")]
    Schedule(#[from] TypesError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("binding: {0}")]
    Binding(#[from] BindingError),
    #[error("impedance: {0}")]
    Impedance(FraError),
    #[error("sweep: {0}")]
    Sweep(FraError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("{0}")]
    Invalid(String),
}

fn default_seed() -> u64 {
    0
}
fn default_duration() -> f64 {
    3600.0
}
fn default_start() -> TimestampMs {
    DEFAULT_START_MS
}

/// A stimulus in a config file; `time_s` counts from the experiment start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub kind: StimulusKind,
    pub time_s: f64,
    #[serde(default = "one")]
    pub intensity: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    pub capacity: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipeSection {
    pub short: Option<CapacitySection>,
    pub middle: Option<CapacitySection>,
    pub long: Option<CapacitySection>,
}

impl PipeSection {
    fn capacities(&self) -> PipeCapacities {
        let d = PipeCapacities::default();
        PipeCapacities {
            short: self.short.map_or(d.short, |s| s.capacity),
            middle: self.middle.map_or(d.middle, |s| s.capacity),
            long: self.long.map_or(d.long, |s| s.capacity),
        }
    }
}

/// Which scalar of the impedance analysis is logged for impedance channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpedanceQuantity {
    #[default]
    Magnitude,
    PhaseDeg,
    Re,
    Im,
    MRms,
    PC,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpedanceSettings {
    #[serde(default = "default_imp_freq")]
    pub frequency_hz: f64,
    #[serde(default = "default_sample_count")]
    pub sample_count: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_clock")]
    pub clock_hz: f64,
    #[serde(default = "one")]
    pub transimpedance: f64,
    #[serde(default)]
    pub quantity: ImpedanceQuantity,
    /// Hold biopotential channels at their previous value in cycles that
    /// excite the tissue.
    #[serde(default)]
    pub blank_biopotentials: bool,
}

fn default_imp_freq() -> f64 {
    500.0
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

impl Default for ImpedanceSettings {
    fn default() -> Self {
        ImpedanceSettings {
            frequency_hz: default_imp_freq(),
            sample_count: default_sample_count(),
            amplitude: default_amplitude(),
            clock_hz: default_clock(),
            transimpedance: 1.0,
            quantity: ImpedanceQuantity::default(),
            blank_biopotentials: false,
        }
    }
}

impl ImpedanceSettings {
    pub fn plan(&self) -> Result<PeriodStablePlan, FraError> {
        if !(MIN_AMPLITUDE_V..=MAX_AMPLITUDE_V).contains(&self.amplitude) {
            return Err(FraError::AmplitudeOutOfRange(self.amplitude));
        }
        plan_frequency(self.frequency_hz, self.sample_count, self.clock_hz)
    }
}

/// Experiment file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_start")]
    pub start_ms: TimestampMs,
    /// Evaluate detectors on the rayon pool.
    #[serde(default)]
    pub parallel_detectors: bool,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub tissue: TissueModel,
    #[serde(default)]
    pub profile: BiopotentialProfile,
    #[serde(default)]
    pub environment: EnvironmentModel,
    #[serde(default, rename = "event")]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub pipe: PipeSection,
    #[serde(default)]
    pub impedance: ImpedanceSettings,
    #[serde(default, rename = "detector")]
    pub detectors: Vec<DetectorConfig>,
    #[serde(default, rename = "actuator")]
    pub actuators: IndexMap<String, ActuatorKind>,
    #[serde(default, rename = "binding")]
    pub bindings: Vec<BindingConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub store: StoreConfig,
}

/// Fully validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub start_ms: TimestampMs,
    pub parallel_detectors: bool,
    pub schedule: AcquisitionSchedule,
    pub tissue: TissueModel,
    pub profile: BiopotentialProfile,
    pub environment: EnvironmentModel,
    pub events: Vec<StimulusEvent>,
    pub pipes: PipeCapacities,
    pub impedance: ImpedanceSettings,
    pub impedance_plan: PeriodStablePlan,
    pub detectors: Vec<DetectorConfig>,
    pub actuators: IndexMap<String, ActuatorKind>,
    pub bindings: Vec<ActuatorBinding>,
    pub sweep: Option<SweepSpec>,
    pub store: StoreConfig,
}

fn to_events(specs: &[EventSpec], start_ms: TimestampMs, duration_s: f64) -> Result<Vec<StimulusEvent>, ConfigError> {
    let mut events = Vec::with_capacity(specs.len());
    for e in specs {
        if !(e.time_s >= 0.0 && e.time_s <= duration_s) {
            return Err(ConfigError::Invalid(format!(
                "event time_s {} is outside the experiment [0, {duration_s}]",
                e.time_s
            )));
        }
        let t = start_ms + (e.time_s * 1000.0).round() as i64;
        events.push(StimulusEvent::new(e.kind, t, e.intensity)?);
    }
    events.sort_by_key(|e| e.time_ms);
    Ok(events)
}

fn check_duration(duration_s: f64) -> Result<(), ConfigError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(ConfigError::Invalid(format!("duration_s must be positive, got {duration_s}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_file(file: ExperimentFile) -> Result<Self, ConfigError> {
        check_duration(file.duration_s)?;
        let schedule = build_schedule(&file.schedule)?;
        file.tissue.validate()?;
        let mut profile = file.profile;
        profile.seed = file.seed;
        profile.validate()?;
        let events = to_events(&file.events, file.start_ms, file.duration_s)?;
        let pipes = file.pipe.capacities();
        if pipes.short == 0 || pipes.middle == 0 || pipes.long == 0 {
            return Err(ConfigError::Invalid("pipe capacities must be positive".into()));
        }
        let impedance_plan = file.impedance.plan().map_err(ConfigError::Impedance)?;
        validate_detectors(&file.detectors, &schedule)?;
        let ids: HashSet<&str> = file.detectors.iter().map(|d| d.id.as_str()).collect();
        let bindings = build_bindings(&file.bindings, &ids, &file.actuators)?;
        if let Some(sweep) = &file.sweep {
            sweep.validate().map_err(ConfigError::Sweep)?;
        }
        file.store.validate()?;
        Ok(ExperimentConfig {
            seed: file.seed,
            duration_s: file.duration_s,
            start_ms: file.start_ms,
            parallel_detectors: file.parallel_detectors,
            schedule,
            tissue: file.tissue,
            profile,
            environment: file.environment,
            events,
            pipes,
            impedance: file.impedance,
            impedance_plan,
            detectors: file.detectors,
            actuators: file.actuators,
            bindings,
            sweep: file.sweep,
            store: file.store,
        })
    }

    /// Replace the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.profile.seed = seed;
        self
    }

    /// Number of acquisition cycles in `duration_s`.
    pub fn cycle_count(&self) -> u64 {
        (self.duration_s * 1000.0 / self.schedule.period_ms() as f64).floor() as u64
    }
}

pub fn parse_experiment(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let file: ExperimentFile = toml::from_str(text)?;
    ExperimentConfig::from_file(file)
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_experiment(&text)
}

/// Open-loop simulation: the plant and its stimuli, no detectors or
/// actuators. Output is one CSV in the log format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_start")]
    pub start_ms: TimestampMs,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub tissue: TissueModel,
    #[serde(default)]
    pub profile: BiopotentialProfile,
    #[serde(default)]
    pub environment: EnvironmentModel,
    #[serde(default, rename = "event")]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub impedance: ImpedanceSettings,
}

/// A scenario is an experiment with nothing closing the loop; it is checked
/// and run through the same path.
pub fn parse_scenario(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let s: ScenarioFile = toml::from_str(text)?;
    ExperimentConfig::from_file(ExperimentFile {
        seed: s.seed,
        duration_s: s.duration_s,
        start_ms: s.start_ms,
        parallel_detectors: false,
        schedule: s.schedule,
        tissue: s.tissue,
        profile: s.profile,
        environment: s.environment,
        events: s.events,
        pipe: PipeSection::default(),
        impedance: s.impedance,
        detectors: Vec::new(),
        actuators: IndexMap::new(),
        bindings: Vec::new(),
        sweep: None,
        store: StoreConfig::default(),
    })
}

pub fn load_scenario(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse_scenario(&text)
}
