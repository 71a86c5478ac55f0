//! Streaming inference: per-sensor reconstruction residuals, EWMA
//! smoothing, per-sensor thresholds and isolate-and-continue masking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{encode_interval, encode_stream, stats_by_index, ChannelStats, EncodedStream};
use crate::error::{Error, Result};
use crate::model::forward::{forward, Dropout};
use crate::model::loss::bce;
use crate::model::params::{apply_mask, MaskedInput, Params};
use crate::model::Checkpoint;
use crate::sensor::{HomeSchema, SensorEvent, SensorSchema, Trace};
use crate::INTERVAL_SECS;

/// Smoothing factor whose weight halves after `halflife` steps.
pub fn ewma_alpha_from_halflife(halflife: usize) -> f64 {
    assert!(halflife >= 1, "half-life must be at least one step");
    1.0 - 0.5f64.powf(1.0 / halflife as f64)
}

/// One EWMA step. The first observation initializes the average. The result
/// is clamped to the span of its two inputs so rounding can never push it
/// outside their convex hull.
pub fn ewma_update(prev: Option<f64>, r: f64, alpha: f64) -> f64 {
    match prev {
        None => r,
        Some(p) => (p + alpha * (r - p)).clamp(p.min(r), p.max(r)),
    }
}

/// Smoothed residual of every sensor, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualState {
    pub alpha: f64,
    r_hat: Vec<Option<f64>>,
}

impl ResidualState {
    pub fn new(alpha: f64, sensors: usize) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1]");
        ResidualState {
            alpha,
            r_hat: vec![None; sensors],
        }
    }

    pub fn update(&mut self, sensor: usize, r: f64) -> f64 {
        let next = ewma_update(self.r_hat[sensor], r, self.alpha);
        self.r_hat[sensor] = Some(next);
        next
    }

    pub fn get(&self, sensor: usize) -> Option<f64> {
        self.r_hat[sensor]
    }
}

/// Mean clamped cross-entropy over the `L × |I_k|` bits of one sensor.
/// `logits` and `bits` are row-major `L×D`.
pub fn sensor_residual(logits: &[f64], bits: &[u8], width: usize, sensor: &SensorSchema) -> f64 {
    let range = sensor.bits();
    let rows = bits.len() / width;
    let mut total = 0.0;
    for t in 0..rows {
        for j in range.clone() {
            total += bce(logits[t * width + j], f64::from(bits[t * width + j]));
        }
    }
    total / (rows * range.len()) as f64
}

/// Forward pass over one window with the given sensors isolated. Returns
/// the logits.
pub fn window_logits(params: &Params, input: &MaskedInput) -> Result<Vec<f64>> {
    Ok(forward(params, &input.values, &input.is_mask, 1, Dropout::Off)?.logits)
}

/// Residuals of every non-isolated sensor of one window (`None` for
/// isolated sensors).
pub fn window_residuals(params: &Params, schema: &HomeSchema, bits: &[u8], isolated: &[bool]) -> Result<Vec<Option<f64>>> {
    let input = apply_mask(bits, schema, isolated, params.mask_value());
    let logits = window_logits(params, &input)?;
    Ok(schema
        .sensors()
        .iter()
        .zip(isolated)
        .map(|(s, &iso)| (!iso).then(|| sensor_residual(&logits, bits, schema.width(), s)))
        .collect())
}

/// Per-sensor trip thresholds: the largest clean unsmoothed residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Baselines {
    pub theta: BTreeMap<String, f64>,
}

impl Baselines {
    /// Thresholds in schema order.
    pub fn for_schema(&self, schema: &HomeSchema) -> Result<Vec<f64>> {
        schema
            .sensors()
            .iter()
            .map(|s| {
                self.theta
                    .get(&s.sensor_id)
                    .copied()
                    .ok_or_else(|| Error::InvalidConfig(format!("no threshold for `{}`", s.sensor_id)))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Baselines = serde_json::from_str(text)?;
        if let Some((k, v)) = b.theta.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("threshold of `{k}` is {v}")));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Thresholds from a clean validation stream: the maximum unsmoothed
/// residual of each sensor over all windows, nothing masked.
pub fn calibrate_baselines(params: &Params, stream: &EncodedStream, schema: &HomeSchema) -> Result<Baselines> {
    let len = params.layout().window_len;
    if stream.num_windows(len) == 0 {
        return Err(Error::InsufficientData("validation stream has no complete window".into()));
    }
    let none = vec![false; schema.len()];
    let mut theta = vec![0.0f64; schema.len()];
    for w in stream.windows(len) {
        for (t, r) in theta.iter_mut().zip(window_residuals(params, schema, w.bits, &none)?) {
            *t = t.max(r.expect("no sensor is isolated"));
        }
    }
    Ok(Baselines {
        theta: schema.sensors().iter().map(|s| s.sensor_id.clone()).zip(theta).collect(),
    })
}

/// A sensor declared faulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sensor_id: String,
    /// Index of the newest interval of the triggering window.
    pub tau: usize,
    /// Stream time at which the triggering window is complete, seconds.
    pub time_s: f64,
    pub r_hat: f64,
    pub theta: f64,
}

/// Flagged sensors in flag order, with the interval that flagged them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IsolationSet {
    pub flagged: Vec<(String, usize)>,
}

impl IsolationSet {
    pub fn contains(&self, sensor_id: &str) -> bool {
        self.flagged.iter().any(|(s, _)| s == sensor_id)
    }
}

/// Streaming detector over one event stream.
pub struct StreamDetector<'a> {
    params: &'a Params,
    schema: &'a HomeSchema,
    stats: Vec<&'a ChannelStats>,
    theta: Vec<f64>,
    window_len: usize,
    state: ResidualState,
    isolated: Vec<bool>,
    isolation: IsolationSet,
    /// The most recent intervals, oldest first, at most `L` rows.
    rows: Vec<u8>,
    next_tau: usize,
}

impl<'a> StreamDetector<'a> {
    pub fn new(checkpoint: &'a Checkpoint, baselines: &Baselines) -> Result<Self> {
        let schema = &checkpoint.schema;
        let window_len = checkpoint.params.layout().window_len;
        Ok(StreamDetector {
            params: &checkpoint.params,
            schema,
            stats: stats_by_index(&checkpoint.stats, schema)?,
            theta: baselines.for_schema(schema)?,
            window_len,
            state: ResidualState::new(ewma_alpha_from_halflife(window_len), schema.len()),
            isolated: vec![false; schema.len()],
            isolation: IsolationSet::default(),
            rows: Vec::with_capacity(window_len * schema.width()),
            next_tau: 0,
        })
    }

    pub fn isolation(&self) -> &IsolationSet {
        &self.isolation
    }

    pub fn residual_state(&self) -> &ResidualState {
        &self.state
    }

    /// Masks a sensor from the next window on, as a verdict would.
    pub fn isolate(&mut self, sensor_id: &str) -> Result<()> {
        let k = self
            .schema
            .index_of(sensor_id)
            .ok_or_else(|| Error::SensorNotInSchema(sensor_id.to_string()))?;
        if !self.isolated[k] {
            self.isolated[k] = true;
            self.isolation.flagged.push((sensor_id.to_string(), self.next_tau.saturating_sub(1)));
        }
        Ok(())
    }

    /// Model input for the currently buffered window, or `None` during
    /// warm-up.
    pub fn window_input(&self) -> Option<MaskedInput> {
        (self.rows.len() == self.window_len * self.schema.width())
            .then(|| apply_mask(&self.rows, self.schema, &self.isolated, self.params.mask_value()))
    }

    /// Encodes one interval's events (timestamps are ignored; every event
    /// is taken to lie in the interval) and advances the stream.
    pub fn step_events(&mut self, events: &[SensorEvent]) -> Result<Vec<Verdict>> {
        let mut readings = vec![Vec::new(); self.schema.len()];
        for e in events {
            let k = self
                .schema
                .index_of(&e.sensor_id)
                .ok_or_else(|| Error::SensorNotInSchema(e.sensor_id.clone()))?;
            readings[k].push(e.value);
        }
        let refs: Vec<&[f64]> = readings.iter().map(Vec::as_slice).collect();
        let mut bits = vec![0u8; self.schema.width()];
        encode_interval(&refs, &self.stats, self.schema, &mut bits);
        self.step_encoded(&bits)
    }

    /// Advances the stream by one encoded interval vector.
    pub fn step_encoded(&mut self, interval: &[u8]) -> Result<Vec<Verdict>> {
        let width = self.schema.width();
        if interval.len() != width {
            return Err(Error::ShapeMismatch(format!("interval has {} bits, expected {width}", interval.len())));
        }
        if self.rows.len() == self.window_len * width {
            self.rows.drain(..width);
        }
        self.rows.extend_from_slice(interval);
        let tau = self.next_tau;
        self.next_tau += 1;
        let Some(input) = self.window_input() else {
            return Ok(Vec::new());
        };
        let logits = window_logits(self.params, &input)?;
        let mut verdicts = Vec::new();
        for (k, sensor) in self.schema.sensors().iter().enumerate() {
            if self.isolated[k] {
                continue;
            }
            let r = sensor_residual(&logits, &self.rows, width, sensor);
            let r_hat = self.state.update(k, r);
            if r_hat > self.theta[k] {
                verdicts.push(Verdict {
                    sensor_id: sensor.sensor_id.clone(),
                    tau,
                    time_s: (tau + 1) as f64 * INTERVAL_SECS,
                    r_hat,
                    theta: self.theta[k],
                });
            }
        }
        // isolation applies from the next window on
        for v in &verdicts {
            let k = self.schema.index_of(&v.sensor_id).expect("verdict sensor is in the schema");
            self.isolated[k] = true;
            self.isolation.flagged.push((v.sensor_id.clone(), tau));
        }
        Ok(verdicts)
    }
}

/// Every verdict of one stream, in order, and the final isolation set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictLog {
    pub verdicts: Vec<Verdict>,
    pub isolation: IsolationSet,
    pub num_intervals: usize,
}

/// Drives the detector over an already encoded stream.
pub fn run_encoded(checkpoint: &Checkpoint, baselines: &Baselines, stream: &EncodedStream) -> Result<VerdictLog> {
    let mut det = StreamDetector::new(checkpoint, baselines)?;
    let mut verdicts = Vec::new();
    for tau in 0..stream.num_intervals {
        verdicts.extend(det.step_encoded(stream.interval(tau))?);
    }
    Ok(VerdictLog {
        verdicts,
        isolation: det.isolation.clone(),
        num_intervals: stream.num_intervals,
    })
}

/// Drives the detector over a whole trace.
pub fn run_stream(checkpoint: &Checkpoint, baselines: &Baselines, trace: &Trace) -> Result<VerdictLog> {
    let stream = encode_stream(trace, &checkpoint.stats, &checkpoint.schema)?;
    run_encoded(checkpoint, baselines, &stream)
}

pub const VERDICT_CSV_HEADER: &str = "segment_id,sensor_id,flag_interval,flag_time_s,r_hat,theta";

/// Verdict rows of several labelled streams, header included.
pub fn verdicts_csv<'a>(logs: impl IntoIterator<Item = (&'a str, &'a VerdictLog)>) -> String {
    let mut out = String::from(VERDICT_CSV_HEADER);
    out.push('\n');
    for (label, log) in logs {
        for v in &log.verdicts {
            writeln!(out, "{label},{},{},{},{},{}", v.sensor_id, v.tau, v.time_s, v.r_hat, v.theta).expect("string write");
        }
    }
    out
}
