//! Detector → actuator coupling.
//!
//! A binding pairs a logical/probabilistic expression over the output vector
//! with an actuator action. Expressions are written in a small text syntax:
//!
//! ```text
//! expr    := or
//! or      := and ( "OR" and )*
//! and     := unary ( "AND" unary )*
//! unary   := "NOT" unary | atom
//! atom    := "(" expr ")" | "BERNOULLI" "(" p ")" | ID [ cmp NUMBER ]
//! cmp     := "==" | "!=" | "<" | "<=" | ">" | ">="
//! ```
//!
//! A bare `ID` means `ID == 1`. A referenced detector that did not run this
//! cycle (entry `0`) suppresses the whole binding unless the expression
//! tests it explicitly with `ID == 0`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{OutputValue, OutputVector};
use crate::sim::{StimulusEvent, StimulusKind};
use crate::types::TimestampMs;

pub const HOMEOSTAT_STEP: f64 = 1.05;
pub const HOMEOSTAT_MIN: f64 = 0.1;
pub const HOMEOSTAT_MAX: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("unexpected character `{0}` at {1}")]
    BadChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected token `{0}`")]
    Unexpected(String),
    #[error("invalid number `{0}`")]
    BadNumber(String),
    #[error("BERNOULLI probability {0} is outside [0, 1]")]
    BadProbability(f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum BindingError {
    #[error("binding `{id}`: {source}")]
    Parse { id: String, source: ExprError },
    #[error("binding `{id}` references unknown detector `{detector}`")]
    UnknownDetector { id: String, detector: String },
    #[error("binding `{id}` references unknown actuator `{actuator}`")]
    UnknownActuator { id: String, actuator: String },
    #[error("binding `{id}` could fire without any detector condition; conjoin BERNOULLI with a detector term")]
    Ungrounded { id: String },
    #[error("binding `{id}`: {msg}")]
    BadAction { id: String, msg: String },
    #[error("duplicate binding id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Gt => a > b,
            CmpOp::Ge => a >= b,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Cmp { detector: String, op: CmpOp, value: f64 },
    Bernoulli(f64),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Cmp { detector, op, value } => write!(f, "{detector} {} {value}", op.as_str()),
            Expr::Bernoulli(p) => write!(f, "BERNOULLI({p})"),
            Expr::Not(e) => write!(f, "NOT ({e})"),
            Expr::And(a, b) => write!(f, "({a} AND {b})"),
            Expr::Or(a, b) => write!(f, "({a} OR {b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Op(CmpOp),
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '=' | '!' | '<' | '>' => {
                let next = chars.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    ('=', Some('=')) => (CmpOp::Eq, 2),
                    ('!', Some('=')) => (CmpOp::Ne, 2),
                    ('<', Some('=')) => (CmpOp::Le, 2),
                    ('>', Some('=')) => (CmpOp::Ge, 2),
                    ('<', _) => (CmpOp::Lt, 1),
                    ('>', _) => (CmpOp::Gt, 1),
                    _ => return Err(ExprError::BadChar(c, i)),
                };
                out.push(Token::Op(op));
                i += len;
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let start = i;
                i += 1;
                while i < chars.len()
                    && (chars[i].is_ascii_alphanumeric() || chars[i] == '.'
                        || ((chars[i] == '-' || chars[i] == '+')
                            && matches!(chars[i - 1], 'e' | 'E')))
                {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let v = text.parse::<f64>().map_err(|_| ExprError::BadNumber(text.clone()))?;
                out.push(Token::Number(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(ExprError::BadChar(other, i)),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

fn is_kw(tok: Option<&Token>, kw: &str) -> bool {
    matches!(tok, Some(Token::Ident(s)) if s.eq_ignore_ascii_case(kw))
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Token, ExprError> {
        let t = self.tokens.get(self.pos).cloned().ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Token) -> Result<(), ExprError> {
        let t = self.next()?;
        if t == want {
            Ok(())
        } else {
            Err(ExprError::Unexpected(format!("{t:?}")))
        }
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and()?;
        while is_kw(self.peek(), "OR") {
            self.pos += 1;
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while is_kw(self.peek(), "AND") {
            self.pos += 1;
            lhs = Expr::And(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if is_kw(self.peek(), "NOT") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.next()? {
            Token::LParen => {
                let e = self.or()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Token::Ident(name) if name.eq_ignore_ascii_case("BERNOULLI") => {
                self.expect(Token::LParen)?;
                let p = match self.next()? {
                    Token::Number(p) => p,
                    t => return Err(ExprError::Unexpected(format!("{t:?}"))),
                };
                self.expect(Token::RParen)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(ExprError::BadProbability(p));
                }
                Ok(Expr::Bernoulli(p))
            }
            Token::Ident(name)
                if ["AND", "OR", "NOT"].iter().any(|k| name.eq_ignore_ascii_case(k)) =>
            {
                Err(ExprError::Unexpected(name))
            }
            Token::Ident(detector) => {
                if let Some(Token::Op(op)) = self.peek().cloned() {
                    self.pos += 1;
                    match self.next()? {
                        Token::Number(value) => Ok(Expr::Cmp { detector, op, value }),
                        t => Err(ExprError::Unexpected(format!("{t:?}"))),
                    }
                } else {
                    Ok(Expr::Cmp { detector, op: CmpOp::Eq, value: 1.0 })
                }
            }
            t => Err(ExprError::Unexpected(format!("{t:?}"))),
        }
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { tokens: tokenize(src)?, pos: 0 };
    let e = p.or()?;
    if let Some(t) = p.peek() {
        return Err(ExprError::Unexpected(format!("{t:?}")));
    }
    Ok(e)
}

impl Expr {
    pub fn detectors(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.walk(&mut |e| {
            if let Expr::Cmp { detector, .. } = e {
                if !out.contains(&detector.as_str()) {
                    out.push(detector.as_str());
                }
            }
        });
        out
    }

    fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Not(e) => e.walk(f),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.walk(f);
                b.walk(f);
            }
            _ => {}
        }
    }

    fn tests_not_executed(&self, id: &str) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if let Expr::Cmp { detector, op: CmpOp::Eq, value } = e {
                found |= detector == id && *value == 0.0;
            }
        });
        found
    }

    /// True when the expression can only hold if some detector comparison
    /// holds, i.e. BERNOULLI leaves never fire on their own.
    pub fn is_grounded(&self) -> bool {
        fn grounded(e: &Expr, negated: bool) -> bool {
            match (e, negated) {
                (Expr::Cmp { .. }, _) => true,
                (Expr::Bernoulli(_), _) => false,
                (Expr::Not(inner), n) => grounded(inner, !n),
                (Expr::And(a, b), false) | (Expr::Or(a, b), true) => {
                    grounded(a, negated) || grounded(b, negated)
                }
                (Expr::Or(a, b), false) | (Expr::And(a, b), true) => {
                    grounded(a, negated) && grounded(b, negated)
                }
            }
        }
        grounded(self, false)
    }

    fn eval(&self, vector: &OutputVector, rng: &mut ChaCha8Rng, adjust: f64) -> bool {
        match self {
            Expr::Cmp { detector, op, value } => {
                let x = vector.get(detector).map_or(0.0, OutputValue::as_f64);
                let threshold = match op {
                    CmpOp::Gt | CmpOp::Ge => value * adjust,
                    CmpOp::Lt | CmpOp::Le => value / adjust,
                    CmpOp::Eq | CmpOp::Ne => *value,
                };
                op.apply(x, threshold)
            }
            Expr::Bernoulli(p) => rng.random::<f64>() < *p,
            Expr::Not(e) => !e.eval(vector, rng, adjust),
            Expr::And(a, b) => a.eval(vector, rng, adjust) && b.eval(vector, rng, adjust),
            Expr::Or(a, b) => a.eval(vector, rng, adjust) || b.eval(vector, rng, adjust),
        }
    }
}

fn default_intensity() -> f64 {
    1.0
}
fn default_timeout_ms() -> u64 {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    #[default]
    Stream,
    Datagram,
}

/// Actuator hardware (or its stand-in), configured once and referenced by
/// bindings through its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActuatorKind {
    RgbLed,
    Relay,
    ElectricalStimulation {
        #[serde(default = "default_intensity")]
        intensity: f64,
    },
    MessageToFile {
        path: PathBuf,
    },
    MessageToIp {
        address: String,
        #[serde(default)]
        transport: Transport,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    GenericSink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Rgb {
    pub r: bool,
    pub g: bool,
    pub b: bool,
}

impl Rgb {
    /// Parse a colour name (`red`, `yellow`, `off`, ...) or an `rgb` flag
    /// string such as `"rg"`.
    pub fn parse(s: &str) -> Option<Rgb> {
        let named = match s {
            "off" => Some(Rgb::default()),
            "red" => Some(Rgb { r: true, g: false, b: false }),
            "green" => Some(Rgb { r: false, g: true, b: false }),
            "blue" => Some(Rgb { r: false, g: false, b: true }),
            "yellow" => Some(Rgb { r: true, g: true, b: false }),
            "cyan" => Some(Rgb { r: false, g: true, b: true }),
            "magenta" => Some(Rgb { r: true, g: false, b: true }),
            "white" => Some(Rgb { r: true, g: true, b: true }),
            _ => None,
        };
        if named.is_some() {
            return named;
        }
        if s.is_empty() || !s.chars().all(|c| matches!(c, 'r' | 'g' | 'b')) {
            return None;
        }
        Some(Rgb { r: s.contains('r'), g: s.contains('g'), b: s.contains('b') })
    }
}

/// What a fired binding asks its actuator to do.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SetLed(Rgb),
    SetRelay(bool),
    Stimulate { intensity: f64 },
    Message(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HomeostatConfig {
    /// Desired activations per hour.
    pub target_rate: f64,
    /// Smoothing time constant of the observed rate, seconds.
    #[serde(default = "default_tau")]
    pub time_constant_s: f64,
}

fn default_tau() -> f64 {
    600.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomeostatState {
    pub target_rate: f64,
    pub threshold_adjust: f64,
    pub observed_rate: f64,
    pub time_constant_s: f64,
}

impl HomeostatState {
    pub fn new(target_rate: f64, time_constant_s: f64) -> Self {
        HomeostatState { target_rate, threshold_adjust: 1.0, observed_rate: target_rate, time_constant_s }
    }
}

/// Exponentially smooth the activation rate, then nudge the threshold
/// multiplier by ×1.05 (over target) or ÷1.05 (under target).
pub fn homeostat_update(state: HomeostatState, fired: bool, dt_s: f64) -> HomeostatState {
    let instant = if fired && dt_s > 0.0 { 3600.0 / dt_s } else { 0.0 };
    let alpha = 1.0 - (-dt_s / state.time_constant_s).exp();
    let observed = state.observed_rate + alpha * (instant - state.observed_rate);
    let adjust = if observed > state.target_rate {
        state.threshold_adjust * HOMEOSTAT_STEP
    } else if observed < state.target_rate {
        state.threshold_adjust / HOMEOSTAT_STEP
    } else {
        state.threshold_adjust
    };
    HomeostatState {
        observed_rate: observed,
        threshold_adjust: adjust.clamp(HOMEOSTAT_MIN, HOMEOSTAT_MAX),
        ..state
    }
}

/// A validated expression → actuator binding.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorBinding {
    pub id: String,
    pub expression: Expr,
    pub actuator: String,
    pub action: Action,
    pub homeostat: Option<HomeostatState>,
}

/// Binding as written in the experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingConfig {
    pub id: String,
    pub when: String,
    pub actuator: String,
    /// LED colour for `rgb_led` actuators.
    #[serde(default)]
    pub color: Option<String>,
    /// Relay position for `relay` actuators.
    #[serde(default)]
    pub on: Option<bool>,
    /// Text for message and sink actuators.
    #[serde(default)]
    pub payload: Option<String>,
    /// Overrides the actuator's stimulation intensity.
    #[serde(default)]
    pub intensity: Option<f64>,
    #[serde(default)]
    pub homeostat: Option<HomeostatConfig>,
}

/// Parse and cross-check bindings against the configured detectors and
/// actuators.
pub fn build_bindings(
    configs: &[BindingConfig],
    detector_ids: &HashSet<&str>,
    actuators: &IndexMap<String, ActuatorKind>,
) -> Result<Vec<ActuatorBinding>, BindingError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(configs.len());
    for b in configs {
        let id = b.id.clone();
        if !seen.insert(b.id.as_str()) {
            return Err(BindingError::DuplicateId(id));
        }
        let expression =
            parse_expr(&b.when).map_err(|source| BindingError::Parse { id: id.clone(), source })?;
        for d in expression.detectors() {
            if !detector_ids.contains(d) {
                return Err(BindingError::UnknownDetector { id, detector: d.to_string() });
            }
        }
        if !expression.is_grounded() {
            return Err(BindingError::Ungrounded { id });
        }
        let kind = actuators.get(&b.actuator).ok_or_else(|| BindingError::UnknownActuator {
            id: id.clone(),
            actuator: b.actuator.clone(),
        })?;
        let bad = |msg: &str| BindingError::BadAction { id: id.clone(), msg: msg.to_string() };
        let action = match kind {
            ActuatorKind::RgbLed => {
                let c = b.color.as_deref().ok_or_else(|| bad("rgb_led needs `color`"))?;
                Action::SetLed(Rgb::parse(c).ok_or_else(|| bad("unknown colour"))?)
            }
            ActuatorKind::Relay => Action::SetRelay(b.on.unwrap_or(true)),
            ActuatorKind::ElectricalStimulation { intensity } => {
                let i = b.intensity.unwrap_or(*intensity);
                if !(0.0..=1.0).contains(&i) {
                    return Err(bad("intensity must be in [0, 1]"));
                }
                Action::Stimulate { intensity: i }
            }
            ActuatorKind::MessageToFile { .. }
            | ActuatorKind::MessageToIp { .. }
            | ActuatorKind::GenericSink => {
                Action::Message(b.payload.clone().unwrap_or_else(|| b.id.clone()))
            }
        };
        let homeostat = match &b.homeostat {
            Some(h) if !(h.target_rate > 0.0 && h.time_constant_s > 0.0) => {
                return Err(bad("homeostat target_rate and time_constant_s must be positive"));
            }
            Some(h) => Some(HomeostatState::new(h.target_rate, h.time_constant_s)),
            None => None,
        };
        out.push(ActuatorBinding { id, expression, actuator: b.actuator.clone(), action, homeostat });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorCommand {
    pub binding_id: String,
    pub actuator: String,
    pub timestamp_ms: TimestampMs,
    pub action: Action,
}

fn cycle_rng(seed: u64, cycle_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cycle_id);
    rng
}

/// Commands for every binding whose expression holds, in declaration order.
/// BERNOULLI draws come from a ChaCha8 stream selected by `(seed, cycle)`.
pub fn evaluate_bindings(
    vector: &OutputVector,
    bindings: &[ActuatorBinding],
    seed: u64,
) -> Vec<ActuatorCommand> {
    let mut rng = cycle_rng(seed, vector.cycle_id);
    bindings
        .iter()
        .filter(|b| {
            let suppressed = b.expression.detectors().into_iter().any(|d| {
                vector.get(d).is_none_or(|v| !v.executed())
                    && !b.expression.tests_not_executed(d)
            });
            let adjust = b.homeostat.map_or(1.0, |h| h.threshold_adjust);
            !suppressed && b.expression.eval(vector, &mut rng, adjust)
        })
        .map(|b| ActuatorCommand {
            binding_id: b.id.clone(),
            actuator: b.actuator.clone(),
            timestamp_ms: vector.timestamp_ms,
            action: b.action.clone(),
        })
        .collect()
}

pub fn iso_timestamp(ms: TimestampMs) -> String {
    DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

/// Receives electrical stimulation requests (the simulator in a closed loop).
pub trait StimulusSink {
    fn inject(&mut self, event: StimulusEvent);
}

impl StimulusSink for crate::sim::PlantSimulator {
    fn inject(&mut self, event: StimulusEvent) {
        crate::sim::PlantSimulator::inject(self, event);
    }
}

impl StimulusSink for Vec<StimulusEvent> {
    fn inject(&mut self, event: StimulusEvent) {
        self.push(event);
    }
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("unknown actuator `{0}`")]
    UnknownActuator(String),
    #[error("actuator `{0}` is disabled after an earlier fatal error")]
    Disabled(String),
    #[error("actuator `{actuator}`: cannot write {path}: {source}")]
    File { actuator: String, path: PathBuf, source: std::io::Error },
    #[error("actuator `{actuator}`: message to {address} dropped: {source}")]
    Network { actuator: String, address: String, source: std::io::Error },
    #[error("actuator `{actuator}` cannot perform {action:?}")]
    Mismatch { actuator: String, action: Action },
}

/// Inspectable register of simulated devices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceState {
    pub led: Rgb,
    pub relays: BTreeMap<String, bool>,
}

/// Serialized executor for actuator commands.
#[derive(Debug)]
pub struct Dispatcher {
    actuators: IndexMap<String, ActuatorKind>,
    state: DeviceState,
    disabled: HashSet<String>,
    sink_log: Vec<String>,
    error_count: u64,
}

impl Dispatcher {
    pub fn new(actuators: IndexMap<String, ActuatorKind>) -> Self {
        Dispatcher {
            actuators,
            state: DeviceState::default(),
            disabled: HashSet::new(),
            sink_log: Vec::new(),
            error_count: 0,
        }
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn sink_log(&self) -> &[String] {
        &self.sink_log
    }

    pub fn error_count(&self) -> u64 {
        self.error_count
    }

    pub fn dispatch(
        &mut self,
        cmd: &ActuatorCommand,
        stimuli: &mut dyn StimulusSink,
    ) -> Result<(), DispatchError> {
        let result = self.dispatch_inner(cmd, stimuli);
        if let Err(e) = &result {
            self.error_count += 1;
            log::error!("{e}");
        }
        result
    }

    fn dispatch_inner(
        &mut self,
        cmd: &ActuatorCommand,
        stimuli: &mut dyn StimulusSink,
    ) -> Result<(), DispatchError> {
        let name = &cmd.actuator;
        if self.disabled.contains(name) {
            return Err(DispatchError::Disabled(name.clone()));
        }
        let kind =
            self.actuators.get(name).ok_or_else(|| DispatchError::UnknownActuator(name.clone()))?;
        let mismatch = || DispatchError::Mismatch { actuator: name.clone(), action: cmd.action.clone() };
        match (kind, &cmd.action) {
            (ActuatorKind::RgbLed, Action::SetLed(rgb)) => self.state.led = *rgb,
            (ActuatorKind::Relay, Action::SetRelay(on)) => {
                self.state.relays.insert(name.clone(), *on);
            }
            (ActuatorKind::ElectricalStimulation { .. }, Action::Stimulate { intensity }) => {
                stimuli.inject(StimulusEvent {
                    kind: StimulusKind::Electrical,
                    time_ms: cmd.timestamp_ms,
                    intensity: *intensity,
                });
            }
            (ActuatorKind::MessageToFile { path }, Action::Message(msg)) => {
                let line = format!("{}\t{}\n", iso_timestamp(cmd.timestamp_ms), msg);
                let written = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .and_then(|mut f| f.write_all(line.as_bytes()));
                if let Err(source) = written {
                    self.disabled.insert(name.clone());
                    return Err(DispatchError::File { actuator: name.clone(), path: path.clone(), source });
                }
            }
            (ActuatorKind::MessageToIp { address, transport, timeout_ms }, Action::Message(msg)) => {
                let line =
                    format!("{}\t{}\t{}\n", iso_timestamp(cmd.timestamp_ms), cmd.binding_id, msg);
                let timeout = Duration::from_millis(*timeout_ms);
                let send = || send_line(address, *transport, timeout, line.as_bytes());
                if let Err(first) = send() {
                    log::warn!("actuator `{name}`: send to {address} failed ({first}); retrying");
                    send().map_err(|source| DispatchError::Network {
                        actuator: name.clone(),
                        address: address.clone(),
                        source,
                    })?;
                }
            }
            (ActuatorKind::GenericSink, Action::Message(msg)) => {
                self.sink_log.push(format!(
                    "{}\t{}\t{}",
                    iso_timestamp(cmd.timestamp_ms),
                    cmd.binding_id,
                    msg
                ));
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }
}

fn send_line(address: &str, transport: Transport, timeout: Duration, line: &[u8]) -> std::io::Result<()> {
    let addr = address.to_socket_addrs()?.next().ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("cannot resolve {address}"))
    })?;
    match transport {
        Transport::Stream => {
            let mut s = TcpStream::connect_timeout(&addr, timeout)?;
            s.set_write_timeout(Some(timeout))?;
            s.write_all(line)
        }
        Transport::Datagram => {
            let bind = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" };
            let sock = UdpSocket::bind(bind)?;
            sock.send_to(line, addr).map(|_| ())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vector(entries: &[(&str, OutputValue)]) -> OutputVector {
        OutputVector {
            cycle_id: 7,
            timestamp_ms: 1_717_200_000_000,
            entries: entries.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn actuators() -> IndexMap<String, ActuatorKind> {
        let mut m = IndexMap::new();
        m.insert("led".to_string(), ActuatorKind::RgbLed);
        m.insert("pump".to_string(), ActuatorKind::Relay);
        m.insert("stim".to_string(), ActuatorKind::ElectricalStimulation { intensity: 0.5 });
        m.insert("sink".to_string(), ActuatorKind::GenericSink);
        m
    }

    fn binding(id: &str, when: &str, actuator: &str) -> BindingConfig {
        BindingConfig {
            id: id.into(),
            when: when.into(),
            actuator: actuator.into(),
            color: Some("red".into()),
            on: None,
            payload: None,
            intensity: None,
            homeostat: None,
        }
    }

    fn build(configs: &[BindingConfig]) -> Vec<ActuatorBinding> {
        let ids: HashSet<&str> = ["D1", "D2", "NOISE"].into_iter().collect();
        build_bindings(configs, &ids, &actuators()).unwrap()
    }

    #[test]
    fn parses_expressions() {
        let e = parse_expr("D1 == 1 AND (D2 != -1 OR NOT NOISE > 2.5e-3)").unwrap();
        assert_eq!(e.detectors(), vec!["D1", "D2", "NOISE"]);
        assert_eq!(parse_expr("D1").unwrap(), Expr::Cmp { detector: "D1".into(), op: CmpOp::Eq, value: 1.0 });
        assert_eq!(parse_expr("bernoulli(0.25) and D1").unwrap().to_string(), "(BERNOULLI(0.25) AND D1 == 1)");
        assert!(parse_expr("D1 ==").is_err());
        assert!(parse_expr("(D1").is_err());
        assert!(parse_expr("D1 D2").is_err());
        assert!(parse_expr("D1 # 2").is_err());
        assert_eq!(parse_expr("BERNOULLI(1.5) AND D1"), Err(ExprError::BadProbability(1.5)));
    }

    #[test]
    fn simple_binding_fires() {
        let b = build(&[binding("b", "D1 == 1", "led")]);
        let cmds = evaluate_bindings(&vector(&[("D1", OutputValue::True)]), &b, 1);
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].action, Action::SetLed(Rgb { r: true, g: false, b: false }));
    }

    #[test]
    fn conjunction_needs_both() {
        let b = build(&[binding("b", "D1==1 AND D2==1", "led")]);
        let v = vector(&[("D1", OutputValue::True), ("D2", OutputValue::False)]);
        assert!(evaluate_bindings(&v, &b, 1).is_empty());
    }

    #[test]
    fn not_executed_entries_suppress_unless_tested() {
        let b = build(&[binding("a", "D1 == 1 OR D2 != 1", "led"), binding("z", "D1 == 1 AND D2 == 0", "led")]);
        let v = vector(&[("D1", OutputValue::True), ("D2", OutputValue::NotExecuted)]);
        let cmds = evaluate_bindings(&v, &b, 1);
        assert_eq!(cmds.len(), 1);
        assert_eq!(cmds[0].binding_id, "z");
    }

    #[test]
    fn numeric_comparisons() {
        let b = build(&[binding("n", "NOISE > 0.5", "led")]);
        assert_eq!(evaluate_bindings(&vector(&[("NOISE", OutputValue::Numeric(0.7))]), &b, 1).len(), 1);
        assert!(evaluate_bindings(&vector(&[("NOISE", OutputValue::Numeric(0.5))]), &b, 1).is_empty());
    }

    #[test]
    fn bernoulli_rate_within_binomial_bound() {
        let b = build(&[binding("p", "BERNOULLI(0.5) AND D1 == 1", "led")]);
        let mut fired = 0;
        for cycle in 0..10_000u64 {
            let mut v = vector(&[("D1", OutputValue::True)]);
            v.cycle_id = cycle;
            fired += evaluate_bindings(&v, &b, 42).len();
        }
        // 3σ of Binomial(10000, 0.5) is 150
        assert!((fired as i64 - 5000).abs() <= 150, "{fired}");
    }

    #[test]
    fn evaluation_is_deterministic_under_seed() {
        let b = build(&[binding("p", "BERNOULLI(0.3) AND D1", "led"), binding("q", "D2 OR BERNOULLI(0.9) AND D1", "sink")]);
        let run = |seed| {
            (0..200u64)
                .flat_map(|c| {
                    let mut v = vector(&[("D1", OutputValue::True), ("D2", OutputValue::False)]);
                    v.cycle_id = c;
                    evaluate_bindings(&v, &b, seed)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn validation_errors() {
        let ids: HashSet<&str> = ["D1"].into_iter().collect();
        let err = build_bindings(&[binding("b", "D9 == 1", "led")], &ids, &actuators()).unwrap_err();
        assert!(matches!(err, BindingError::UnknownDetector { .. }));
        let err = build_bindings(&[binding("b", "BERNOULLI(0.5)", "led")], &ids, &actuators()).unwrap_err();
        assert!(matches!(err, BindingError::Ungrounded { .. }));
        let err = build_bindings(&[binding("b", "D1 OR BERNOULLI(0.1)", "led")], &ids, &actuators()).unwrap_err();
        assert!(matches!(err, BindingError::Ungrounded { .. }));
        let err = build_bindings(&[binding("b", "NOT (D1 AND BERNOULLI(0.1))", "led")], &ids, &actuators()).unwrap_err();
        assert!(matches!(err, BindingError::Ungrounded { .. }));
        let err = build_bindings(&[binding("b", "D1", "horn")], &ids, &actuators()).unwrap_err();
        assert!(matches!(err, BindingError::UnknownActuator { .. }));
        let mut bad_color = binding("b", "D1", "led");
        bad_color.color = Some("ultraviolet".into());
        assert!(build_bindings(&[bad_color], &ids, &actuators()).is_err());
        assert!(build_bindings(&[binding("b", "D1", "led"), binding("b", "D1", "led")], &ids, &actuators()).is_err());
    }

    #[test]
    fn homeostat_fixed_point() {
        let s = HomeostatState::new(3600.0, 600.0);
        let next = homeostat_update(s, true, 1.0);
        assert_eq!(next.threshold_adjust, 1.0);
        assert_eq!(next.observed_rate, 3600.0);
    }

    #[test]
    fn homeostat_over_and_under_firing() {
        // iterate the law: firing every 1 s cycle against a 60/h target
        let mut s = HomeostatState::new(60.0, 600.0);
        let mut expected = 1.0f64;
        for _ in 0..100 {
            s = homeostat_update(s, true, 1.0);
            expected = (expected * HOMEOSTAT_STEP).min(HOMEOSTAT_MAX);
        }
        assert!((s.threshold_adjust - expected).abs() < 1e-12);
        assert_eq!(s.threshold_adjust, HOMEOSTAT_MAX);

        let mut s = HomeostatState::new(60.0, 600.0);
        for _ in 0..100 {
            s = homeostat_update(s, false, 1.0);
        }
        assert_eq!(s.threshold_adjust, HOMEOSTAT_MIN);
    }

    #[test]
    fn homeostat_raises_numeric_thresholds() {
        let mut b = build(&[binding("n", "NOISE > 0.5", "led")]);
        b[0].homeostat = Some(HomeostatState { threshold_adjust: 2.0, ..HomeostatState::new(10.0, 600.0) });
        assert!(evaluate_bindings(&vector(&[("NOISE", OutputValue::Numeric(0.7))]), &b, 1).is_empty());
        assert_eq!(evaluate_bindings(&vector(&[("NOISE", OutputValue::Numeric(1.1))]), &b, 1).len(), 1);
    }

    #[test]
    fn dispatch_updates_device_registers() {
        let mut d = Dispatcher::new(actuators());
        let mut events: Vec<StimulusEvent> = Vec::new();
        let cmd = |actuator: &str, action| ActuatorCommand {
            binding_id: "b".into(),
            actuator: actuator.into(),
            timestamp_ms: 1_000,
            action,
        };
        d.dispatch(&cmd("led", Action::SetLed(Rgb::parse("r").unwrap())), &mut events).unwrap();
        assert!(d.state().led.r && !d.state().led.g);
        d.dispatch(&cmd("pump", Action::SetRelay(true)), &mut events).unwrap();
        assert_eq!(d.state().relays.get("pump"), Some(&true));
        d.dispatch(&cmd("stim", Action::Stimulate { intensity: 0.5 }), &mut events).unwrap();
        assert_eq!(events, vec![StimulusEvent { kind: StimulusKind::Electrical, time_ms: 1_000, intensity: 0.5 }]);
        d.dispatch(&cmd("sink", Action::Message("hello".into())), &mut events).unwrap();
        assert_eq!(d.sink_log(), ["1970-01-01T00:00:01.000Z\tb\thello"]);
        assert!(d.dispatch(&cmd("led", Action::SetRelay(true)), &mut events).is_err());
        assert_eq!(d.error_count(), 1);
    }

    #[test]
    fn message_to_file_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("msg.log");
        let mut acts = IndexMap::new();
        acts.insert("file".to_string(), ActuatorKind::MessageToFile { path: path.clone() });
        let mut d = Dispatcher::new(acts);
        for (ts, text) in [(0, "first"), (1_717_200_000_123, "touch detected")] {
            let cmd = ActuatorCommand {
                binding_id: "b".into(),
                actuator: "file".into(),
                timestamp_ms: ts,
                action: Action::Message(text.into()),
            };
            d.dispatch(&cmd, &mut Vec::new()).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().last().unwrap(), "2024-06-01T00:00:00.123Z\ttouch detected");
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn unwritable_file_disables_only_that_actuator() {
        let dir = tempfile::tempdir().unwrap();
        let mut acts = actuators();
        acts.insert("file".to_string(), ActuatorKind::MessageToFile { path: dir.path().join("missing/x.log") });
        let mut d = Dispatcher::new(acts);
        let mk = |actuator: &str, action| ActuatorCommand { binding_id: "b".into(), actuator: actuator.into(), timestamp_ms: 0, action };
        assert!(matches!(d.dispatch(&mk("file", Action::Message("x".into())), &mut Vec::new()), Err(DispatchError::File { .. })));
        assert!(matches!(d.dispatch(&mk("file", Action::Message("x".into())), &mut Vec::new()), Err(DispatchError::Disabled(_))));
        d.dispatch(&mk("led", Action::SetLed(Rgb::parse("green").unwrap())), &mut Vec::new()).unwrap();
        assert_eq!(d.error_count(), 2);
    }

    fn arb_vector() -> impl Strategy<Value = OutputVector> {
        let v = prop_oneof![
            Just(OutputValue::False),
            Just(OutputValue::NotExecuted),
            (-2.0f64..2.0).prop_map(OutputValue::Numeric),
        ];
        (v.clone(), v.clone(), v, any::<u64>()).prop_map(|(a, b, c, cycle)| OutputVector {
            cycle_id: cycle,
            timestamp_ms: 0,
            entries: vec![("D1".into(), a), ("D2".into(), b), ("NOISE".into(), c)],
        })
    }

    proptest! {
        #[test]
        fn homeostat_stays_bounded(steps in prop::collection::vec((any::<bool>(), 0.1f64..100.0), 0..500)) {
            let mut s = HomeostatState::new(30.0, 300.0);
            for (fired, dt) in steps {
                s = homeostat_update(s, fired, dt);
                prop_assert!((HOMEOSTAT_MIN..=HOMEOSTAT_MAX).contains(&s.threshold_adjust));
            }
        }

        #[test]
        fn no_spontaneous_actuation(v in arb_vector(), seed in any::<u64>()) {
            // every expression here is grounded, so a vector with no 1-entries
            // can only fire through a satisfied comparison
            let b = build(&[
                binding("a", "D1", "led"),
                binding("b", "BERNOULLI(0.9) AND D2 == 1", "led"),
                binding("c", "NOISE > 1.5", "led"),
            ]);
            let cmds = evaluate_bindings(&v, &b, seed);
            let noise_high = matches!(v.get("NOISE"), Some(OutputValue::Numeric(x)) if x > 1.5);
            prop_assert_eq!(cmds.is_empty(), !noise_high);
        }
    }
}
