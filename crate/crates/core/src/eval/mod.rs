//! Segment-duplication evaluation: protocol windows, fault plans, pluggable
//! detectors, experiment driver, reports and the command line front end.

pub mod cli;
pub mod metrics;
pub mod report;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{calibrate_stats, encode_stream, StatsTable};
use crate::error::{Error, Result};
use crate::faults::{inject_all, profile_channels, sample_multi_faults, sample_single_fault, FaultSettings, FaultSpec, ProfileTable};
use crate::model::{train, Checkpoint, TrainConfig};
use crate::runtime::{calibrate_baselines, run_stream, Baselines, IsolationSet, Verdict, VerdictLog};
use crate::sensor::{HomeSchema, Trace};
use crate::synth::SynthConfig;
use crate::{INTERVAL_SECS, WINDOW_LEN};

pub use metrics::{metrics_report, MetricsReport};

const HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multi,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Multi => "multi",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyKind {
    Clean,
    Injected,
}

impl CopyKind {
    pub fn name(self) -> &'static str {
        match self {
            CopyKind::Clean => "clean",
            CopyKind::Injected => "injected",
        }
    }
}

impl fmt::Display for CopyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Window lengths of the full-scale protocol, in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub full_hours: f64,
    pub train_hours: f64,
    pub val_hours: f64,
    pub segments: usize,
    pub segment_hours: f64,
    /// Shortest trace that may be scaled down.
    pub min_hours: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            full_hours: 780.0,
            train_hours: 500.0,
            val_hours: 100.0,
            segments: 30,
            segment_hours: 6.0,
            min_hours: 10.0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.full_hours, self.train_hours, self.val_hours, self.segment_hours, self.min_hours];
        if positive.iter().any(|h| !(h.is_finite() && *h > 0.0)) || self.segments == 0 {
            return Err(Error::InvalidConfig("protocol windows must be positive".into()));
        }
        let used = self.train_hours + self.val_hours + self.segments as f64 * self.segment_hours;
        if used > self.full_hours + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "protocol needs {used} h but spans only {} h",
                self.full_hours
            )));
        }
        Ok(())
    }
}

/// Concrete windows of one trace, in seconds from its origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub duration_s: f64,
    /// Ratio of every window to its full-scale length.
    pub scale: f64,
    pub scaled: bool,
    pub train: (f64, f64),
    pub val: (f64, f64),
    pub segments: Vec<(f64, f64)>,
}

impl ProtocolPlan {
    pub fn segment_secs(&self) -> f64 {
        self.segments.first().map_or(0.0, |(a, b)| b - a)
    }
}

/// Splits a trace into training, validation and evaluation segments. Traces
/// shorter than the full protocol shrink every window by the same ratio.
pub fn build_protocol(duration_s: f64, cfg: &ProtocolConfig) -> Result<ProtocolPlan> {
    cfg.validate()?;
    let hours = duration_s / HOUR;
    if !(hours >= cfg.min_hours) {
        return Err(Error::InsufficientData(format!(
            "trace spans {hours:.2} h, at least {} h are needed",
            cfg.min_hours
        )));
    }
    let scaled = hours < cfg.full_hours;
    // hours to seconds, multiplying before dividing keeps round grids exact
    let at = |h: f64| if scaled { h * duration_s / cfg.full_hours } else { h * HOUR };
    let val_start = cfg.train_hours;
    let eval_start = val_start + cfg.val_hours;
    let segments = (0..cfg.segments)
        .map(|i| {
            let a = eval_start + i as f64 * cfg.segment_hours;
            (at(a), at(a + cfg.segment_hours))
        })
        .collect();
    Ok(ProtocolPlan {
        duration_s,
        scale: if scaled { hours / cfg.full_hours } else { 1.0 },
        scaled,
        train: (0.0, at(val_start)),
        val: (at(val_start), at(eval_start)),
        segments,
    })
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: TrainConfig,
    pub protocol: ProtocolConfig,
    pub synth: SynthConfig,
    pub faults: FaultSettings,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.protocol.validate()?;
        if !(self.faults.delta_default_min > 0.0) {
            return Err(Error::InvalidConfig("fault window must be positive".into()));
        }
        if self.faults.multi_min > self.faults.multi_max {
            return Err(Error::InvalidConfig("multi_min exceeds multi_max".into()));
        }
        Ok(())
    }

    /// One seed drives the simulated home, the model and the fault plans.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.model.seed = seed;
        self
    }
}

/// Per-segment fault plan; times are relative to the segment start and
/// `segment` names the segment.
pub fn plan_faults(
    schema: &HomeSchema,
    plan: &ProtocolPlan,
    mode: Mode,
    seed: u64,
    settings: &FaultSettings,
) -> Result<Vec<FaultSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match mode {
        Mode::Single => 1,
        Mode::Multi => 2,
    });
    let mut out = Vec::new();
    for (i, (a, b)) in plan.segments.iter().enumerate() {
        let window = (0.0, b - a);
        let segment_seed: u64 = rng.random();
        let specs = match mode {
            Mode::Single => vec![sample_single_fault(schema, window, segment_seed, settings)?],
            Mode::Multi => sample_multi_faults(schema, window, segment_seed, settings)?,
        };
        out.extend(specs.into_iter().map(|s| FaultSpec { segment: Some(i), ..s }));
    }
    Ok(out)
}

/// One evaluation segment as a clean and a fault-injected copy.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCase {
    pub segment_id: usize,
    pub clean: Trace,
    pub injected: Trace,
    pub faults: Vec<FaultSpec>,
    pub injected_events: Vec<usize>,
}

impl SegmentCase {
    pub fn copy(&self, copy: CopyKind) -> &Trace {
        match copy {
            CopyKind::Clean => &self.clean,
            CopyKind::Injected => &self.injected,
        }
    }
}

/// The injected copy of segment `segment`.
pub fn inject_segment(
    trace: &Trace,
    schema: &HomeSchema,
    plan: &ProtocolPlan,
    segment: usize,
    faults: &[FaultSpec],
    profiles: &ProfileTable,
    settings: &FaultSettings,
) -> Result<(Trace, Vec<FaultSpec>, Vec<usize>)> {
    let &(a, b) = plan
        .segments
        .get(segment)
        .ok_or_else(|| Error::InvalidConfig(format!("segment {segment} is not part of the protocol")))?;
    let specs: Vec<FaultSpec> = faults.iter().filter(|f| f.segment == Some(segment)).cloned().collect();
    let clean = trace.slice(a, b);
    let (injected, counts) = inject_all(&clean, schema, &specs, profiles, settings)?;
    Ok((injected, specs, counts))
}

pub fn build_cases(
    trace: &Trace,
    schema: &HomeSchema,
    plan: &ProtocolPlan,
    faults: &[FaultSpec],
    profiles: &ProfileTable,
    settings: &FaultSettings,
) -> Result<Vec<SegmentCase>> {
    (0..plan.segments.len())
        .map(|i| {
            let (a, b) = plan.segments[i];
            let (injected, faults, injected_events) = inject_segment(trace, schema, plan, i, faults, profiles, settings)?;
            Ok(SegmentCase {
                segment_id: i,
                clean: trace.slice(a, b),
                injected,
                faults,
                injected_events,
            })
        })
        .collect()
}

/// Anything that turns one segment copy into verdicts.
pub trait Detector {
    fn detect(&self, case: &SegmentCase, copy: CopyKind) -> Result<VerdictLog>;
}

/// The trained encoder with its thresholds.
pub struct ModelDetector<'a> {
    pub checkpoint: &'a Checkpoint,
    pub baselines: &'a Baselines,
}

impl Detector for ModelDetector<'_> {
    fn detect(&self, case: &SegmentCase, copy: CopyKind) -> Result<VerdictLog> {
        run_stream(self.checkpoint, self.baselines, case.copy(copy))
    }
}

/// Flags exactly the injected sensors at their fault onsets.
pub struct OracleDetector;

impl Detector for OracleDetector {
    fn detect(&self, case: &SegmentCase, copy: CopyKind) -> Result<VerdictLog> {
        let trace = case.copy(copy);
        let mut log = VerdictLog {
            num_intervals: trace.num_intervals(),
            ..VerdictLog::default()
        };
        if copy == CopyKind::Injected {
            for f in &case.faults {
                let tau = (f.start / INTERVAL_SECS).floor() as usize;
                log.verdicts.push(Verdict {
                    sensor_id: f.sensor.clone(),
                    tau,
                    time_s: f.start,
                    r_hat: 1.0,
                    theta: 0.0,
                });
                log.isolation.flagged.push((f.sensor.clone(), tau));
            }
        }
        Ok(log)
    }
}

/// Never flags anything.
pub struct MuteDetector;

impl Detector for MuteDetector {
    fn detect(&self, case: &SegmentCase, copy: CopyKind) -> Result<VerdictLog> {
        Ok(VerdictLog {
            verdicts: Vec::new(),
            isolation: IsolationSet::default(),
            num_intervals: case.copy(copy).num_intervals(),
        })
    }
}

/// Scored outcome of one segment copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub segment_id: usize,
    pub copy: CopyKind,
    pub mode: Mode,
    pub injected: Vec<String>,
    /// Distinct flagged sensors in flag order.
    pub flagged: Vec<String>,
    /// Flag interval of each entry of `flagged`.
    pub flag_taus: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Earliest delay among correctly localized faults, minutes.
    pub first_correct_delay_min: Option<f64>,
    /// Delay of every correctly localized fault, minutes.
    pub delays_min: Vec<f64>,
    pub faults: Vec<FaultSpec>,
}

impl SegmentRow {
    /// `flags` holds (sensor, interval, time in seconds) in verdict order.
    pub fn score(
        segment_id: usize,
        copy: CopyKind,
        mode: Mode,
        injected: Vec<String>,
        flags: Vec<(String, usize, f64)>,
        faults: &[FaultSpec],
    ) -> Self {
        let mut flagged: Vec<String> = Vec::new();
        let mut flag_taus = Vec::new();
        let mut flag_times = Vec::new();
        for (s, tau, t) in flags {
            if !flagged.contains(&s) {
                flagged.push(s);
                flag_taus.push(tau);
                flag_times.push(t);
            }
        }
        let tp = flagged.iter().filter(|s| injected.contains(s)).count();
        let fp = flagged.len() - tp;
        let fn_ = injected.iter().filter(|s| !flagged.contains(s)).count();
        // a flag that precedes the onset counts as zero delay
        let delays_min: Vec<f64> = faults
            .iter()
            .filter_map(|f| {
                let i = flagged.iter().position(|s| *s == f.sensor)?;
                Some((flag_times[i] - f.start).max(0.0) / 60.0)
            })
            .collect();
        let first_correct_delay_min = delays_min.iter().copied().reduce(f64::min);
        SegmentRow {
            segment_id,
            copy,
            mode,
            injected,
            flagged,
            flag_taus,
            tp,
            fp,
            fn_,
            first_correct_delay_min,
            delays_min,
            faults: faults.to_vec(),
        }
    }

    pub fn from_log(case: &SegmentCase, copy: CopyKind, mode: Mode, log: &VerdictLog) -> Self {
        let (injected, faults) = match copy {
            CopyKind::Clean => (Vec::new(), &[][..]),
            CopyKind::Injected => {
                let mut ids: Vec<String> = Vec::new();
                for f in &case.faults {
                    if !ids.contains(&f.sensor) {
                        ids.push(f.sensor.clone());
                    }
                }
                (ids, &case.faults[..])
            }
        };
        let flags = log.verdicts.iter().map(|v| (v.sensor_id.clone(), v.tau, v.time_s)).collect();
        Self::score(case.segment_id, copy, mode, injected, flags, faults)
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.segment_id, self.copy)
    }
}

/// Rows and verdict logs of every segment copy, in segment order with the
/// clean copy first.
pub fn evaluate_cases(
    cases: &[SegmentCase],
    detector: &dyn Detector,
    mode: Mode,
) -> Result<(Vec<SegmentRow>, Vec<(String, VerdictLog)>)> {
    let mut rows = Vec::with_capacity(2 * cases.len());
    let mut logs = Vec::with_capacity(2 * cases.len());
    for case in cases {
        for copy in [CopyKind::Clean, CopyKind::Injected] {
            let log = detector.detect(case, copy)?;
            let row = SegmentRow::from_log(case, copy, mode, &log);
            logs.push((row.label(), log));
            rows.push(row);
        }
    }
    Ok((rows, logs))
}

/// A checkpoint trained on the training window with thresholds from the
/// validation window.
#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub checkpoint: Checkpoint,
    pub baselines: Baselines,
    pub loss_curve: Vec<f64>,
    pub train_secs: f64,
}

/// Fits encoding statistics and the encoder on `train_trace`.
pub fn fit_checkpoint(train_trace: &Trace, schema: &HomeSchema, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<f64>)> {
    let stats = calibrate_stats(train_trace, schema)?;
    fit_checkpoint_with_stats(train_trace, schema, stats, cfg)
}

/// Fits the encoder with fixed encoding statistics.
pub fn fit_checkpoint_with_stats(
    train_trace: &Trace,
    schema: &HomeSchema,
    stats: StatsTable,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<f64>)> {
    let stream = encode_stream(train_trace, &stats, schema)?;
    let windows: Vec<_> = stream.windows(WINDOW_LEN).collect();
    if windows.is_empty() {
        return Err(Error::InsufficientData("training trace is shorter than one window".into()));
    }
    let (mut params, curve) = train(&windows, schema, cfg)?;
    // thresholds must be computed with the weights exactly as stored
    params.round_to_f32();
    Ok((Checkpoint::new(params, schema.clone(), stats)?, curve))
}

/// Per-sensor thresholds from a clean stream.
pub fn fit_baselines(checkpoint: &Checkpoint, val_trace: &Trace) -> Result<Baselines> {
    let stream = encode_stream(val_trace, &checkpoint.stats, &checkpoint.schema)?;
    calibrate_baselines(&checkpoint.params, &stream, &checkpoint.schema)
}

pub fn train_detector(trace: &Trace, schema: &HomeSchema, plan: &ProtocolPlan, cfg: &TrainConfig) -> Result<TrainedDetector> {
    let started = Instant::now();
    let (checkpoint, loss_curve) = fit_checkpoint(&trace.slice(plan.train.0, plan.train.1), schema, cfg)?;
    let baselines = fit_baselines(&checkpoint, &trace.slice(plan.val.0, plan.val.1))?;
    Ok(TrainedDetector {
        checkpoint,
        baselines,
        loss_curve,
        train_secs: started.elapsed().as_secs_f64(),
    })
}

/// Fault magnitudes are sized from the clean training window.
pub fn training_profiles(trace: &Trace, schema: &HomeSchema, plan: &ProtocolPlan) -> Result<ProfileTable> {
    profile_channels(&trace.slice(plan.train.0, plan.train.1), schema)
}

/// Outcome of one mode under one seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub mode: Mode,
    pub seed: u64,
    pub plan: ProtocolPlan,
    pub faults: Vec<FaultSpec>,
    pub rows: Vec<SegmentRow>,
    pub logs: Vec<(String, VerdictLog)>,
    pub metrics: MetricsReport,
    pub eval_secs: f64,
}

/// Plans faults for `mode`, builds the segment copies and scores `detector`.
pub fn evaluate_detector(
    trace: &Trace,
    schema: &HomeSchema,
    plan: &ProtocolPlan,
    mode: Mode,
    seed: u64,
    settings: &FaultSettings,
    detector: &dyn Detector,
) -> Result<Experiment> {
    let started = Instant::now();
    let profiles = training_profiles(trace, schema, plan)?;
    let faults = plan_faults(schema, plan, mode, seed, settings)?;
    let cases = build_cases(trace, schema, plan, &faults, &profiles, settings)?;
    let (rows, logs) = evaluate_cases(&cases, detector, mode)?;
    let metrics = metrics_report(&rows);
    Ok(Experiment {
        mode,
        seed,
        plan: plan.clone(),
        faults,
        rows,
        logs,
        metrics,
        eval_secs: started.elapsed().as_secs_f64(),
    })
}

/// Train on the training window, calibrate on the validation window, then
/// score every segment copy.
pub fn run_experiment(
    trace: &Trace,
    schema: &HomeSchema,
    mode: Mode,
    seed: u64,
    config: &Config,
) -> Result<(Experiment, TrainedDetector)> {
    let plan = build_protocol(trace.duration, &config.protocol)?;
    let mut model_cfg = config.model.clone();
    model_cfg.seed = seed;
    let trained = train_detector(trace, schema, &plan, &model_cfg)?;
    let detector = ModelDetector {
        checkpoint: &trained.checkpoint,
        baselines: &trained.baselines,
    };
    let experiment = evaluate_detector(trace, schema, &plan, mode, seed, &config.faults, &detector)?;
    Ok((experiment, trained))
}
