//! Shared domain types: channels, records, the acquisition schedule and
//! device-resolution quantization.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Biopotential ADC step (64 nV).
pub const BIOPOTENTIAL_RESOLUTION_V: f64 = 64e-9;

/// Shortest and longest allowed period between measurements, in seconds.
pub const MIN_PERIOD_S: f64 = 0.1;
pub const MAX_PERIOD_S: f64 = 100.0;

/// Default interval between impedance stimulation pulses, in seconds.
pub const DEFAULT_STIMULATION_INTERVAL_S: f64 = 10.0;

/// Milliseconds since the Unix epoch, UTC.
pub type TimestampMs = i64;

#[derive(Debug, Error, PartialEq)]
pub enum TypesError {
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("quantization resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("period between measurements {0} s is outside [{MIN_PERIOD_S}, {MAX_PERIOD_S}] s")]
    PeriodOutOfRange(f64),
    #[error("stimulation interval must be positive, got {0} s")]
    BadStimulationInterval(f64),
    #[error("duplicate channel name `{0}`")]
    DuplicateChannel(String),
    #[error("invalid channel name `{0}` (use letters, digits and '_')")]
    BadChannelName(String),
    #[error("unknown channel kind `{0}`")]
    UnknownKind(String),
}

/// Closed list of sensor kinds carried by the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Biopotential1,
    Biopotential2,
    Impedance1,
    Impedance2,
    Transpiration,
    SapFlow,
    SoilMoisture,
    SoilTemperature,
    AirTemperature,
    AirHumidity,
    AirPressure,
    Light,
    MagnetometerXyz,
    AccelerometerXyz,
    RfPower,
    ExternalTemperature,
}

/// Sampling group; acquisition always runs groups in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelGroup {
    Voltage,
    Impedance,
    Environment,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 16] = [
        ChannelKind::Biopotential1,
        ChannelKind::Biopotential2,
        ChannelKind::Impedance1,
        ChannelKind::Impedance2,
        ChannelKind::Transpiration,
        ChannelKind::SapFlow,
        ChannelKind::SoilMoisture,
        ChannelKind::SoilTemperature,
        ChannelKind::AirTemperature,
        ChannelKind::AirHumidity,
        ChannelKind::AirPressure,
        ChannelKind::Light,
        ChannelKind::MagnetometerXyz,
        ChannelKind::AccelerometerXyz,
        ChannelKind::RfPower,
        ChannelKind::ExternalTemperature,
    ];

    pub fn group(self) -> ChannelGroup {
        match self {
            ChannelKind::Biopotential1 | ChannelKind::Biopotential2 => ChannelGroup::Voltage,
            ChannelKind::Impedance1 | ChannelKind::Impedance2 => ChannelGroup::Impedance,
            _ => ChannelGroup::Environment,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Biopotential1 => "biopotential1",
            ChannelKind::Biopotential2 => "biopotential2",
            ChannelKind::Impedance1 => "impedance1",
            ChannelKind::Impedance2 => "impedance2",
            ChannelKind::Transpiration => "transpiration",
            ChannelKind::SapFlow => "sap_flow",
            ChannelKind::SoilMoisture => "soil_moisture",
            ChannelKind::SoilTemperature => "soil_temperature",
            ChannelKind::AirTemperature => "air_temperature",
            ChannelKind::AirHumidity => "air_humidity",
            ChannelKind::AirPressure => "air_pressure",
            ChannelKind::Light => "light",
            ChannelKind::MagnetometerXyz => "magnetometer_xyz",
            ChannelKind::AccelerometerXyz => "accelerometer_xyz",
            ChannelKind::RfPower => "rf_power",
            ChannelKind::ExternalTemperature => "external_temperature",
        }
    }

    /// Declared reading range `(min, max)` in the channel's SI unit.
    pub fn range(self) -> (f64, f64) {
        match self {
            // volts
            ChannelKind::Biopotential1 | ChannelKind::Biopotential2 => (-2.5, 2.5),
            // ohms (impedance magnitude or component; signed for re/im)
            ChannelKind::Impedance1 | ChannelKind::Impedance2 => (-1e9, 1e9),
            // relative units, %
            ChannelKind::Transpiration | ChannelKind::SapFlow => (0.0, 100.0),
            ChannelKind::SoilMoisture | ChannelKind::AirHumidity => (0.0, 100.0),
            // °C
            ChannelKind::SoilTemperature | ChannelKind::AirTemperature => (-40.0, 85.0),
            ChannelKind::ExternalTemperature => (0.0, 150.0),
            // hPa
            ChannelKind::AirPressure => (300.0, 1100.0),
            // lux
            ChannelKind::Light => (0.0, 200_000.0),
            // tesla
            ChannelKind::MagnetometerXyz => (-1e-3, 1e-3),
            // m/s²
            ChannelKind::AccelerometerXyz => (-160.0, 160.0),
            // dBm
            ChannelKind::RfPower => (-120.0, 20.0),
        }
    }

    /// Device quantization step. `None` means the value is stored unquantized
    /// (impedance estimates are computed, not digitized).
    pub fn resolution(self) -> Option<f64> {
        match self {
            ChannelKind::Biopotential1 | ChannelKind::Biopotential2 => {
                Some(BIOPOTENTIAL_RESOLUTION_V)
            }
            ChannelKind::Impedance1 | ChannelKind::Impedance2 => None,
            ChannelKind::Transpiration | ChannelKind::SapFlow => Some(0.01),
            ChannelKind::SoilMoisture | ChannelKind::AirHumidity => Some(0.1),
            ChannelKind::SoilTemperature | ChannelKind::AirTemperature => Some(0.01),
            ChannelKind::ExternalTemperature => Some(crate::sim::LM35_STEP_C),
            ChannelKind::AirPressure => Some(0.01),
            ChannelKind::Light => Some(1.0),
            ChannelKind::MagnetometerXyz => Some(1e-8),
            ChannelKind::AccelerometerXyz => Some(0.001),
            ChannelKind::RfPower => Some(0.1),
        }
    }

    /// Quantize to the device step and saturate to the declared range.
    pub fn digitize(self, raw: f64) -> Result<f64, TypesError> {
        let (lo, hi) = self.range();
        let q = match self.resolution() {
            Some(step) => quantize(raw, step)?,
            None if raw.is_finite() => raw,
            None => return Err(TypesError::NonFinite(raw)),
        };
        Ok(q.clamp(lo, hi))
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelKind {
    type Err = TypesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ChannelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TypesError::UnknownKind(s.to_string()))
    }
}

/// A configured acquisition channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelId {
    pub name: String,
    pub kind: ChannelKind,
}

impl ChannelId {
    pub fn new(name: impl Into<String>, kind: ChannelKind) -> Self {
        ChannelId { name: name.into(), kind }
    }
}

fn valid_channel_name(name: &str) -> bool {
    // '0' is reserved for "detector disabled"
    !name.is_empty()
        && name != "0"
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// The standard channel set of a fully equipped device.
pub fn default_channels() -> Vec<ChannelId> {
    use ChannelKind::*;
    vec![
        ChannelId::new("bio1", Biopotential1),
        ChannelId::new("bio2", Biopotential2),
        ChannelId::new("imp1", Impedance1),
        ChannelId::new("imp2", Impedance2),
        ChannelId::new("transpiration", Transpiration),
        ChannelId::new("sap_flow", SapFlow),
        ChannelId::new("soil_moisture", SoilMoisture),
        ChannelId::new("soil_temp", SoilTemperature),
        ChannelId::new("air_temp", AirTemperature),
        ChannelId::new("air_humidity", AirHumidity),
        ChannelId::new("air_pressure", AirPressure),
        ChannelId::new("light", Light),
        ChannelId::new("mag_x", MagnetometerXyz),
        ChannelId::new("mag_y", MagnetometerXyz),
        ChannelId::new("mag_z", MagnetometerXyz),
        ChannelId::new("acc_x", AccelerometerXyz),
        ChannelId::new("acc_y", AccelerometerXyz),
        ChannelId::new("acc_z", AccelerometerXyz),
        ChannelId::new("rf_power", RfPower),
        ChannelId::new("ext_temp", ExternalTemperature),
    ]
}

/// One timestamped sample of all configured channels, in schedule order.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub timestamp_ms: TimestampMs,
    pub values: IndexMap<String, f64>,
}

impl Record {
    pub fn new(timestamp_ms: TimestampMs) -> Self {
        Record { timestamp_ms, values: IndexMap::new() }
    }

    pub fn get(&self, channel: &str) -> Option<f64> {
        self.values.get(channel).copied()
    }

    pub fn insert(&mut self, channel: impl Into<String>, value: f64) {
        self.values.insert(channel.into(), value);
    }
}

/// Round `raw` to the nearest multiple of `resolution`, ties away from zero.
pub fn quantize(raw: f64, resolution: f64) -> Result<f64, TypesError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(TypesError::BadResolution(resolution));
    }
    if !raw.is_finite() {
        return Err(TypesError::NonFinite(raw));
    }
    // f64::round is half-away-from-zero
    Ok(resolution * (raw / resolution).round())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub period_s: f64,
    #[serde(default = "default_stimulation_interval")]
    pub stimulation_interval_s: f64,
    #[serde(default = "default_channels")]
    pub channels: Vec<ChannelId>,
}

fn default_stimulation_interval() -> f64 {
    DEFAULT_STIMULATION_INTERVAL_S
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            period_s: 1.0,
            stimulation_interval_s: DEFAULT_STIMULATION_INTERVAL_S,
            channels: default_channels(),
        }
    }
}

/// Validated acquisition plan. Voltage channels come first, then impedance
/// channels, then every other sensor; relative order inside a group is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSchedule {
    period_s: f64,
    stimulation_interval_s: f64,
    channel_order: Vec<ChannelId>,
}

impl AcquisitionSchedule {
    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    pub fn period_ms(&self) -> i64 {
        (self.period_s * 1000.0).round() as i64
    }

    pub fn stimulation_interval_s(&self) -> f64 {
        self.stimulation_interval_s
    }

    pub fn channel_order(&self) -> &[ChannelId] {
        &self.channel_order
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelId> {
        self.channel_order.iter().find(|c| c.name == name)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = &str> {
        self.channel_order.iter().map(|c| c.name.as_str())
    }
}

pub fn build_schedule(config: &ScheduleConfig) -> Result<AcquisitionSchedule, TypesError> {
    let period = config.period_s;
    if !(MIN_PERIOD_S..=MAX_PERIOD_S).contains(&period) {
        return Err(TypesError::PeriodOutOfRange(period));
    }
    if !(config.stimulation_interval_s > 0.0 && config.stimulation_interval_s.is_finite()) {
        return Err(TypesError::BadStimulationInterval(config.stimulation_interval_s));
    }
    let mut seen = HashSet::new();
    for ch in &config.channels {
        if !valid_channel_name(&ch.name) {
            return Err(TypesError::BadChannelName(ch.name.clone()));
        }
        if !seen.insert(ch.name.as_str()) {
            return Err(TypesError::DuplicateChannel(ch.name.clone()));
        }
    }
    let mut order = config.channels.clone();
    order.sort_by_key(|c| c.kind.group());
    Ok(AcquisitionSchedule {
        period_s: period,
        stimulation_interval_s: config.stimulation_interval_s,
        channel_order: order,
    })
}
