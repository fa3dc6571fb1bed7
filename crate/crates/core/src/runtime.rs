//! The acquisition and decision loop.
//!
//! Each cycle samples the simulator in schedule order (voltage, impedance,
//! environment), logs the record, pushes it through the pipes, evaluates the
//! detectors of every tier that received data, and dispatches the commands
//! of the bindings that fire.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use thiserror::Error;

use crate::actuation::{
    evaluate_bindings, homeostat_update, ActuatorBinding, ActuatorCommand, DeviceState, Dispatcher, StimulusSink,
};
use crate::config::{ConfigError, ExperimentConfig, ImpedanceQuantity};
use crate::detectors::{run_detectors, run_detectors_parallel, Clock, DetectorConfig, OutputVector, ReadySnapshots};
use crate::fra::{analyze_pair, run_sweep, write_sweep_csv, ExcitationWaveform, FraError, ImpedanceAnalysis, SweepError, SweepPoint};
use crate::pipeline::{PipeSet, PipelineError, Tier};
use crate::sim::{PlantSimulator, SimError, StimulusEvent, TissueResponder};
use crate::store::{format_line, header_line, read_log, replay, LogStore, StoreConfig, StoreError};
use crate::types::{ChannelGroup, Record, TimestampMs};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("log: {0}")]
    Store(#[from] StoreError),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("pipes: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("impedance analysis: {0}")]
    Fra(#[from] FraError),
    #[error("sweep: {0}")]
    Sweep(#[from] SweepError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config has no [sweep] section")]
    NoSweep,
    #[error("log channels [{}] do not match the configured schedule [{}]", log.join(","), schedule.join(","))]
    LogSchema { log: Vec<String>, schedule: Vec<String> },
}

/// Where acquired records go.
#[derive(Debug)]
pub enum LogTarget {
    /// Segmented, capacity-bounded log directory.
    Store(StoreConfig),
    /// A single CSV file in the log format.
    File(PathBuf),
    /// Records are not kept.
    Discard,
}

enum LogSink {
    Store(LogStore, Option<(PathBuf, usize)>),
    File(BufWriter<File>, PathBuf, Vec<String>),
    Discard,
}

impl LogSink {
    fn open(target: LogTarget, channels: Vec<String>) -> Result<Self, RuntimeError> {
        Ok(match target {
            LogTarget::Store(cfg) => {
                let html = cfg.html.clone().map(|p| (p, cfg.html_window));
                LogSink::Store(LogStore::create(&cfg, channels)?, html)
            }
            LogTarget::File(path) => {
                let io = |source| RuntimeError::Io { path: path.clone(), source };
                let mut w = BufWriter::new(File::create(&path).map_err(io)?);
                w.write_all(header_line(&channels).as_bytes()).map_err(io)?;
                LogSink::File(w, path, channels)
            }
            LogTarget::Discard => LogSink::Discard,
        })
    }

    fn append(&mut self, record: &Record) -> Result<(), RuntimeError> {
        match self {
            LogSink::Store(store, _) => store.append(record)?,
            LogSink::File(w, path, channels) => {
                let line = format_line(record, channels)?;
                w.write_all(line.as_bytes()).map_err(|source| RuntimeError::Io { path: path.clone(), source })?;
            }
            LogSink::Discard => {}
        }
        Ok(())
    }

    fn emit_html(&self) -> Result<(), RuntimeError> {
        if let LogSink::Store(store, Some((path, window))) = self {
            store.emit_html(*window, path)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), RuntimeError> {
        self.emit_html()?;
        if let LogSink::File(w, path, _) = self {
            w.flush().map_err(|source| RuntimeError::Io { path: path.clone(), source })?;
        }
        Ok(())
    }
}

/// What one pass of the decision stage produced.
#[derive(Debug, Clone)]
pub struct CycleOutcome {
    pub cycle_id: u64,
    pub ready: Vec<Tier>,
    pub vector: OutputVector,
    pub commands: Vec<ActuatorCommand>,
    pub dispatch_errors: u64,
}

/// Pipes, detectors, bindings and dispatch: everything downstream of the
/// record. Shared by live runs and replays.
#[derive(Debug)]
pub struct DecisionLoop {
    pipes: PipeSet,
    detectors: Vec<DetectorConfig>,
    bindings: Vec<ActuatorBinding>,
    dispatcher: Dispatcher,
    seed: u64,
    start_ms: TimestampMs,
    period_s: f64,
    parallel: bool,
    cycle: u64,
}

impl DecisionLoop {
    pub fn new(config: &ExperimentConfig) -> Result<Self, RuntimeError> {
        Ok(DecisionLoop {
            pipes: PipeSet::new(config.pipes)?,
            detectors: config.detectors.clone(),
            bindings: config.bindings.clone(),
            dispatcher: Dispatcher::new(config.actuators.clone()),
            seed: config.seed,
            start_ms: config.start_ms,
            period_s: config.schedule.period_s(),
            parallel: config.parallel_detectors,
            cycle: 0,
        })
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn pipes(&self) -> &PipeSet {
        &self.pipes
    }

    pub fn bindings(&self) -> &[ActuatorBinding] {
        &self.bindings
    }

    pub fn process(&mut self, record: Record, stimuli: &mut dyn StimulusSink) -> Result<CycleOutcome, RuntimeError> {
        let now_ms = record.timestamp_ms;
        let ready = self.pipes.push(record)?;
        let mut snaps = ReadySnapshots::new();
        for &tier in &ready {
            snaps.set(tier, self.pipes.snapshot(tier));
        }
        let clock = Clock { now_ms, start_ms: self.start_ms };
        let vector = if self.parallel {
            run_detectors_parallel(self.cycle, &self.detectors, &snaps, clock)
        } else {
            run_detectors(self.cycle, &self.detectors, &snaps, clock)
        };
        let commands = evaluate_bindings(&vector, &self.bindings, self.seed);
        for b in &mut self.bindings {
            if let Some(h) = b.homeostat {
                let fired = commands.iter().any(|c| c.binding_id == b.id);
                b.homeostat = Some(homeostat_update(h, fired, self.period_s));
            }
        }
        let mut dispatch_errors = 0;
        for cmd in &commands {
            if self.dispatcher.dispatch(cmd, stimuli).is_err() {
                dispatch_errors += 1;
            }
        }
        let outcome = CycleOutcome { cycle_id: self.cycle, ready, vector, commands, dispatch_errors };
        self.cycle += 1;
        Ok(outcome)
    }
}

/// End-of-run report.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub cycles: u64,
    /// Commands issued, per binding id.
    pub activations: IndexMap<String, u64>,
    pub dispatch_errors: u64,
    pub commands: Vec<ActuatorCommand>,
    pub device_state: DeviceState,
    pub evicted_segments: u64,
    pub wall_time: Duration,
}

impl RunSummary {
    pub fn total_activations(&self) -> u64 {
        self.activations.values().sum()
    }

    fn absorb(&mut self, outcome: CycleOutcome) {
        self.cycles += 1;
        self.dispatch_errors += outcome.dispatch_errors;
        for c in &outcome.commands {
            *self.activations.entry(c.binding_id.clone()).or_default() += 1;
        }
        self.commands.extend(outcome.commands);
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cycles: {}", self.cycles)?;
        writeln!(f, "activations: {}", self.total_activations())?;
        for (id, n) in &self.activations {
            writeln!(f, "  {id}: {n}")?;
        }
        writeln!(f, "errors: {}", self.dispatch_errors)?;
        if self.evicted_segments > 0 {
            writeln!(f, "evicted log segments: {}", self.evicted_segments)?;
        }
        writeln!(f, "wall time: {:.3} s", self.wall_time.as_secs_f64())?;
        for c in &self.commands {
            writeln!(f, "{}\t{}\t{}\t{:?}", crate::actuation::iso_timestamp(c.timestamp_ms), c.binding_id, c.actuator, c.action)?;
        }
        Ok(())
    }
}

fn impedance_value(a: &ImpedanceAnalysis, q: ImpedanceQuantity) -> f64 {
    match q {
        ImpedanceQuantity::Magnitude => a.magnitude,
        ImpedanceQuantity::PhaseDeg => a.phase_deg,
        ImpedanceQuantity::Re => a.re,
        ImpedanceQuantity::Im => a.im,
        ImpedanceQuantity::MRms => a.m_rms,
        ImpedanceQuantity::PC => a.p_c,
    }
}

/// A running experiment, stepped one cycle at a time.
pub struct Experiment {
    config: ExperimentConfig,
    sim: PlantSimulator,
    decisions: DecisionLoop,
    sink: LogSink,
    excitation: ExcitationWaveform,
    held: IndexMap<String, f64>,
    cycle: u64,
    total_cycles: u64,
    evicted: u64,
}

impl Experiment {
    /// Build all runtime state. Nothing is logged until the first step.
    pub fn new(config: ExperimentConfig, target: LogTarget) -> Result<Self, RuntimeError> {
        let mut sim = PlantSimulator::new(config.tissue, config.profile, config.environment, config.start_ms)?;
        for e in &config.events {
            sim.inject(*e);
        }
        let excitation = ExcitationWaveform::from_plan(&config.impedance_plan, config.impedance.amplitude)?;
        let decisions = DecisionLoop::new(&config)?;
        let channels: Vec<String> = config.schedule.channel_names().map(str::to_string).collect();
        let sink = LogSink::open(target, channels)?;
        let total_cycles = config.cycle_count();
        Ok(Experiment {
            config,
            sim,
            decisions,
            sink,
            excitation,
            held: IndexMap::new(),
            cycle: 0,
            total_cycles,
            evicted: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }
    pub fn simulator(&self) -> &PlantSimulator {
        &self.sim
    }
    pub fn simulator_mut(&mut self) -> &mut PlantSimulator {
        &mut self.sim
    }
    pub fn decisions(&self) -> &DecisionLoop {
        &self.decisions
    }
    pub fn is_finished(&self) -> bool {
        self.cycle >= self.total_cycles
    }
    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    fn cycle_time(&self, cycle: u64) -> TimestampMs {
        self.config.start_ms + cycle as i64 * self.config.schedule.period_ms()
    }

    fn impedance_due(&self) -> bool {
        let interval = (self.config.schedule.stimulation_interval_s() * 1000.0).round() as i64;
        let period = self.config.schedule.period_ms();
        let rel = self.cycle as i64 * period;
        self.cycle == 0 || rel.div_euclid(interval) != (rel - period).div_euclid(interval)
    }

    /// Acquire the record for the current cycle.
    pub fn acquire(&mut self) -> Result<Record, RuntimeError> {
        let t = self.cycle_time(self.cycle);
        let excite = self.impedance_due();
        let blank = excite && self.config.impedance.blank_biopotentials;
        let mut rec = Record::new(t);
        let order: Vec<_> = self.config.schedule.channel_order().to_vec();
        for ch in &order {
            let value = match ch.kind.group() {
                ChannelGroup::Voltage => match self.held.get(&ch.name) {
                    Some(&v) if blank => v,
                    _ => self.sim.sample(ch, t)?,
                },
                ChannelGroup::Impedance => match self.held.get(&ch.name) {
                    Some(&v) if !excite => v,
                    _ => {
                        let resp = self.sim.impedance_response(ch, &self.excitation, t)?;
                        let a = analyze_pair(&self.excitation, &resp, self.config.impedance.transimpedance)?;
                        impedance_value(&a, self.config.impedance.quantity)
                    }
                },
                ChannelGroup::Environment => self.sim.sample(ch, t)?,
            };
            if ch.kind.group() != ChannelGroup::Environment {
                self.held.insert(ch.name.clone(), value);
            }
            rec.insert(ch.name.clone(), value);
        }
        Ok(rec)
    }

    /// Run one full cycle. Returns `None` once the duration is used up.
    pub fn step(&mut self) -> Result<Option<CycleOutcome>, RuntimeError> {
        if self.is_finished() {
            return Ok(None);
        }
        let rec = self.acquire()?;
        self.sink.append(&rec)?;
        let outcome = self.decisions.process(rec, &mut self.sim)?;
        if outcome.ready.contains(&Tier::Middle) {
            self.sink.emit_html()?;
        }
        self.cycle += 1;
        Ok(Some(outcome))
    }

    /// Run to the end. With `wall_clock`, each cycle starts no earlier than
    /// its real-time slot.
    pub fn run(mut self, wall_clock: bool) -> Result<RunSummary, RuntimeError> {
        let started = Instant::now();
        let period = Duration::from_millis(self.config.schedule.period_ms() as u64);
        let mut summary = RunSummary::default();
        loop {
            if wall_clock {
                let due = started + period * self.cycle as u32;
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
            match self.step()? {
                Some(outcome) => summary.absorb(outcome),
                None => break,
            }
        }
        self.sink.finish()?;
        if let LogSink::Store(store, _) = &self.sink {
            self.evicted = store.evicted_segments();
        }
        summary.device_state = self.decisions.dispatcher.state().clone();
        summary.evicted_segments = self.evicted;
        summary.wall_time = started.elapsed();
        Ok(summary)
    }
}

/// Shift the experiment so that it starts now; used for wall-clock runs.
pub fn anchor_to_now(mut config: ExperimentConfig) -> ExperimentConfig {
    let now = chrono::Utc::now().timestamp_millis();
    let shift = now - config.start_ms;
    config.start_ms = now;
    for e in &mut config.events {
        e.time_ms += shift;
    }
    config
}

/// `run`: the autonomous loop, logging to the configured store.
pub fn run_experiment(config: ExperimentConfig, wall_clock: bool) -> Result<RunSummary, RuntimeError> {
    let config = if wall_clock { anchor_to_now(config) } else { config };
    let target = LogTarget::Store(config.store.clone());
    Experiment::new(config, target)?.run(wall_clock)
}

/// `sweep`: impedance spectrum of the configured tissue, written as CSV.
pub fn run_sweep_command(config: &ExperimentConfig, out: &Path) -> Result<Vec<SweepPoint>, RuntimeError> {
    let spec = config.sweep.as_ref().ok_or(RuntimeError::NoSweep)?;
    let mut source = TissueResponder::new(config.tissue, config.seed);
    let points = run_sweep(spec, &mut source)?;
    for p in &points {
        if p.snap_error_hz() != 0.0 {
            log::info!("requested {} Hz measured at {} Hz", p.requested_hz, p.analysis.frequency);
        }
    }
    let io = |source| RuntimeError::Io { path: out.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(out).map_err(io)?);
    let rows: Vec<ImpedanceAnalysis> = points.iter().map(|p| p.analysis).collect();
    write_sweep_csv(&mut w, &rows).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(points)
}

/// `simulate`: open-loop acquisition written to one CSV file.
pub fn simulate(config: ExperimentConfig, out: &Path) -> Result<RunSummary, RuntimeError> {
    Experiment::new(config, LogTarget::File(out.to_path_buf()))?.run(false)
}

/// Result of feeding a recorded log through the decision stage.
#[derive(Debug, Clone, Default)]
pub struct ReplaySummary {
    pub summary: RunSummary,
    pub vectors: Vec<OutputVector>,
    /// Electrical stimulation requested during the replay (not applied).
    pub stimuli: Vec<StimulusEvent>,
}

/// `replay`: run detectors and bindings over a recorded log.
pub fn replay_log(config: &ExperimentConfig, log: &Path, speed: f64) -> Result<ReplaySummary, RuntimeError> {
    let started = Instant::now();
    let (channels, records) = read_log(log)?;
    let schedule: Vec<String> = config.schedule.channel_names().map(str::to_string).collect();
    if channels != schedule {
        return Err(RuntimeError::LogSchema { log: channels, schedule });
    }
    let mut decisions = DecisionLoop::new(config)?;
    let mut out = ReplaySummary::default();
    for rec in replay(records, speed)? {
        let outcome = decisions.process(rec, &mut out.stimuli)?;
        out.vectors.push(outcome.vector.clone());
        out.summary.absorb(outcome);
    }
    out.summary.device_state = decisions.dispatcher().state().clone();
    out.summary.wall_time = started.elapsed();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_experiment;
    use crate::store::read_log;

    fn config(extra: &str, dir: &Path) -> ExperimentConfig {
        let text = format!(
            "seed = 3\nduration_s = 60\n[store]\ndir = \"{}\"\n{extra}",
            dir.join("log").display()
        );
        parse_experiment(&text).unwrap()
    }

    #[test]
    fn one_hour_at_one_second_logs_3600_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config("", dir.path());
        c.duration_s = 3600.0;
        let summary = run_experiment(c, false).unwrap();
        assert_eq!(summary.cycles, 3600);
        let (_, recs) = read_log(&dir.path().join("log")).unwrap();
        assert_eq!(recs.len(), 3600);
        assert_eq!(recs[1].timestamp_ms - recs[0].timestamp_ms, 1000);
    }

    #[test]
    fn cycle_order_voltage_impedance_environment() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(config("", dir.path()), LogTarget::Discard).unwrap();
        exp.simulator_mut().enable_call_log();
        for _ in 0..25 {
            exp.step().unwrap();
        }
        let calls = exp.simulator_mut().take_call_log();
        let mut by_t: IndexMap<i64, Vec<ChannelGroup>> = IndexMap::new();
        for c in calls {
            by_t.entry(c.t_ms).or_default().push(c.group);
        }
        assert_eq!(by_t.len(), 25);
        for (i, groups) in by_t.values().enumerate() {
            assert!(groups.windows(2).all(|w| w[0] <= w[1]), "cycle {i}: {groups:?}");
            // impedance is excited at 0 s, 10 s, 20 s
            let excited = groups.contains(&ChannelGroup::Impedance);
            assert_eq!(excited, i % 10 == 0, "cycle {i}");
        }
    }

    #[test]
    fn impedance_held_between_stimulations() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(config("", dir.path()), LogTarget::Discard).unwrap();
        let recs: Vec<Record> = (0..12).map(|_| {
            let r = exp.acquire().unwrap();
            exp.cycle += 1;
            r
        }).collect();
        let z0 = recs[0].get("imp1").unwrap();
        let analytic = crate::sim::TissueModel::default().analytic_impedance(500.0).unwrap().norm();
        assert!((z0 - analytic).abs() / analytic < 1e-9);
        assert!(recs[..10].iter().all(|r| r.get("imp1") == Some(z0)));
    }

    #[test]
    fn blanking_holds_biopotentials_while_exciting() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(
            config("[impedance]\nblank_biopotentials = true\n[profile]\nnoise_rms = 1e-4", dir.path()),
            LogTarget::Discard,
        )
        .unwrap();
        let recs: Vec<Record> = (0..11).map(|_| {
            let r = exp.acquire().unwrap();
            exp.cycle += 1;
            r
        }).collect();
        assert_eq!(recs[10].get("bio1"), recs[9].get("bio1"));
        assert_ne!(recs[9].get("bio1"), recs[8].get("bio1"));
    }

    const TOUCH: &str = r#"
[[event]]
kind = "touch"
time_s = 30

[[detector]]
id = "PEAK"
channel = "bio1"
kind = "peak"
threshold_sigma = 5

[actuator.led]
kind = "rgb_led"

[[binding]]
id = "touch_led"
when = "PEAK"
actuator = "led"
color = "red"
"#;

    #[test]
    fn touch_lights_led_within_a_cycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(config(TOUCH, dir.path()), LogTarget::Discard).unwrap();
        let mut first = None;
        while let Some(o) = exp.step().unwrap() {
            if first.is_none() && !o.commands.is_empty() {
                first = Some(o.cycle_id);
            }
        }
        let c = first.expect("LED command");
        assert!((30..=31).contains(&c), "{c}");
        assert!(exp.decisions().dispatcher().state().led.r);
    }

    #[test]
    fn unknown_detector_refused_before_logging() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "[store]\ndir = \"{}\"\n{}",
            dir.path().join("log").display(),
            TOUCH.replace("when = \"PEAK\"", "when = \"GHOST\"")
        );
        assert!(parse_experiment(&text).is_err());
        assert!(!dir.path().join("log").exists());
    }

    #[test]
    fn replay_reproduces_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(&format!("{TOUCH}\n[[detector]]\nid = \"NOISE\"\nchannel = \"bio2\"\nkind = \"noise_level\"\n"), dir.path());
        let mut exp = Experiment::new(c.clone(), LogTarget::Store(c.store.clone())).unwrap();
        let mut live = Vec::new();
        while let Some(o) = exp.step().unwrap() {
            live.push(o.vector);
        }
        drop(exp);
        let replayed = replay_log(&c, &dir.path().join("log"), f64::INFINITY).unwrap();
        assert_eq!(replayed.vectors, live);
    }

    #[test]
    fn sweep_command_matches_analytic() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("[sweep]\nf_min = 10\nf_max = 100000\npoints = 20\n", dir.path());
        let out = dir.path().join("sweep.csv");
        let points = run_sweep_command(&c, &out).unwrap();
        for p in &points {
            let z = c.tissue.analytic_impedance(p.analysis.frequency).unwrap();
            assert!((p.analysis.magnitude - z.norm()).abs() / z.norm() < 1e-3);
        }
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with(crate::fra::SWEEP_CSV_HEADER));
        assert_eq!(text.lines().count(), 21);
        assert!(matches!(run_sweep_command(&config("", dir.path()), &out), Err(RuntimeError::NoSweep)));
    }

    #[test]
    fn resistor_sweep_has_zero_phase() {
        let dir = tempfile::tempdir().unwrap();
        let c = config("[tissue]\nr_series = 2200\nr_parallel = 0\nc_parallel = 0\n[sweep]\nf_min = 8\nf_max = 300000\npoints = 15\n", dir.path());
        let points = run_sweep_command(&c, &dir.path().join("s.csv")).unwrap();
        assert!(points.iter().all(|p| p.analysis.phase_deg.abs() <= 0.01));
    }

    #[test]
    fn simulate_writes_single_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("sim.csv");
        let s = simulate(config("", dir.path()), &out).unwrap();
        assert_eq!(s.cycles, 60);
        let (ch, recs) = read_log(&out).unwrap();
        assert_eq!(ch.len(), 20);
        assert_eq!(recs.len(), 60);
    }
}
