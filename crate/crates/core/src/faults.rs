//! Fault models as trace transformations, plus injection-plan samplers.
//!
//! Numeric channels follow the classic sample-level definitions (outlier,
//! spike, stuck-at, high-noise, drift, fail-stop). Binary channels have no
//! magnitude, so each fault is realized in event space while keeping its
//! signature: an isolated toggle pair, a short burst, a frozen state, random
//! chatter, a slowly growing stream of spurious activations, or silence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{HomeSchema, SensorEvent, SensorKind, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    Outlier,
    Spike,
    StuckAt,
    HighNoise,
    Drift,
    FailStop,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::Outlier,
        FaultKind::Spike,
        FaultKind::StuckAt,
        FaultKind::HighNoise,
        FaultKind::Drift,
        FaultKind::FailStop,
    ];

    /// Whether the fault acts over a window `[start, start + duration)`.
    pub fn is_windowed(self) -> bool {
        !matches!(self, FaultKind::Outlier | FaultKind::FailStop)
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Outlier => "outlier",
            FaultKind::Spike => "spike",
            FaultKind::StuckAt => "stuck_at",
            FaultKind::HighNoise => "high_noise",
            FaultKind::Drift => "drift",
            FaultKind::FailStop => "fail_stop",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == s || format!("{k:?}") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fault kind `{s}`")))
    }
}

/// One fault to inject.
///
/// `params` holds the kind-specific magnitude (outlier value, spike step,
/// stuck value, noise sigma, drift slope per second). When empty the
/// magnitude is derived from the channel profile at injection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub sensor: String,
    /// Onset, seconds from the stream origin.
    pub start: f64,
    /// Window length in seconds; unused by outlier and fail-stop.
    pub delta: f64,
    #[serde(default)]
    pub params: Vec<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<usize>,
}

impl FaultSpec {
    /// End of the affected window; fail-stop never ends.
    pub fn end(&self) -> f64 {
        match self.kind {
            FaultKind::FailStop => f64::INFINITY,
            FaultKind::Outlier => self.start,
            _ => self.start + self.delta,
        }
    }
}

/// Clean-stream statistics of one channel, used to size injected faults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub sensor_id: String,
    pub mean: f64,
    pub std: f64,
    /// Events per minute.
    pub event_rate: f64,
}

pub type ProfileTable = BTreeMap<String, ChannelProfile>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub spec: FaultSpec,
    pub segment_id: usize,
    pub injected_event_count: usize,
}

/// Magnitude conventions and window lengths; all overridable from config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultSettings {
    pub delta_default_min: f64,
    pub outlier_sigmas: f64,
    pub noise_sigmas: f64,
    pub drift_sigmas: f64,
    pub spike_sigmas: f64,
    pub binary_spike_factor: f64,
    pub binary_spike_secs: f64,
    pub binary_noise_factor: f64,
    pub binary_drift_factor: f64,
    pub multi_lambda: f64,
    pub multi_min: usize,
    pub multi_max: usize,
}

impl Default for FaultSettings {
    fn default() -> Self {
        FaultSettings {
            delta_default_min: 30.0,
            outlier_sigmas: 6.0,
            noise_sigmas: 6.0,
            drift_sigmas: 10.0,
            spike_sigmas: 6.0,
            binary_spike_factor: 10.0,
            binary_spike_secs: 120.0,
            binary_noise_factor: 5.0,
            binary_drift_factor: 5.0,
            multi_lambda: 3.0,
            multi_min: 1,
            multi_max: 5,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-channel mean, standard deviation and event rate over a clean trace.
pub fn profile_channels(trace: &Trace, schema: &HomeSchema) -> Result<ProfileTable> {
    if trace.events.is_empty() {
        return Err(Error::InsufficientData("cannot profile an empty trace".into()));
    }
    let minutes = trace.duration / 60.0;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    for e in &trace.events {
        if let Some(i) = schema.index_of(&e.sensor_id) {
            values[i].push(e.value);
        }
    }
    let mut table = ProfileTable::new();
    for (sensor, vals) in schema.sensors().iter().zip(&values) {
        if vals.is_empty() {
            log::warn!("sensor `{}` has no events in the profiling trace", sensor.sensor_id);
        }
        let (mean, std) = mean_std(vals);
        table.insert(
            sensor.sensor_id.clone(),
            ChannelProfile {
                sensor_id: sensor.sensor_id.clone(),
                mean,
                std,
                event_rate: if minutes > 0.0 { vals.len() as f64 / minutes } else { 0.0 },
            },
        );
    }
    Ok(table)
}

/// Resolves the kind-specific magnitude for a numeric channel.
pub fn default_magnitude(kind: FaultKind, profile: &ChannelProfile, settings: &FaultSettings) -> f64 {
    let sigma = if profile.std > 0.0 { profile.std } else { 1.0 };
    match kind {
        FaultKind::Outlier => settings.outlier_sigmas * sigma,
        FaultKind::Spike => (settings.spike_sigmas * profile.std).max(1.0),
        FaultKind::StuckAt => profile.mean,
        FaultKind::HighNoise => (settings.noise_sigmas * profile.std).max(1.0),
        FaultKind::Drift => (settings.drift_sigmas * profile.std).max(1.0),
        FaultKind::FailStop => 0.0,
    }
}

/// Injects one fault. Returns the faulty trace and the number of events that
/// were added, modified or removed.
pub fn inject(
    trace: &Trace,
    schema: &HomeSchema,
    spec: &FaultSpec,
    profile: &ChannelProfile,
    settings: &FaultSettings,
) -> Result<(Trace, usize)> {
    let sensor = schema
        .get(&spec.sensor)
        .ok_or_else(|| Error::SensorNotInSchema(spec.sensor.clone()))?;
    if !(spec.start >= 0.0) {
        return Err(Error::InvalidConfig(format!("fault start {} is negative", spec.start)));
    }
    if spec.kind.is_windowed() && !(spec.delta > 0.0) {
        return Err(Error::InvalidConfig("windowed fault needs a positive delta".into()));
    }
    let mut spec = spec.clone();
    if spec.start >= trace.duration {
        log::warn!(
            "fault on `{}` starts at {} beyond trace end {}",
            spec.sensor,
            spec.start,
            trace.duration
        );
        return Ok((trace.clone(), 0));
    }
    if spec.kind.is_windowed() && spec.start + spec.delta > trace.duration {
        log::warn!("fault window on `{}` clipped to the trace end", spec.sensor);
        spec.delta = trace.duration - spec.start;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = trace.events.clone();
    let count = match sensor.kind {
        SensorKind::Numeric => inject_numeric(&mut events, &spec, profile, settings, &mut rng, trace.duration),
        SensorKind::Binary => inject_binary(&mut events, &spec, profile, settings, &mut rng, trace.duration),
    };
    Ok((Trace::new(events, trace.duration), count))
}

fn window_indices(events: &[SensorEvent], sensor: &str, start: f64, end: f64) -> Vec<usize> {
    events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.sensor_id == sensor && e.timestamp >= start && e.timestamp < end)
        .map(|(i, _)| i)
        .collect()
}

fn fail_stop(events: &mut Vec<SensorEvent>, spec: &FaultSpec) -> usize {
    let before = events.len();
    events.retain(|e| !(e.sensor_id == spec.sensor && e.timestamp >= spec.start));
    let removed = before - events.len();
    if removed == 0 {
        log::warn!("fail-stop on `{}`: sensor already silent", spec.sensor);
    }
    removed
}

fn inject_numeric(
    events: &mut Vec<SensorEvent>,
    spec: &FaultSpec,
    profile: &ChannelProfile,
    settings: &FaultSettings,
    rng: &mut ChaCha8Rng,
    duration: f64,
) -> usize {
    let magnitude = spec
        .params
        .first()
        .copied()
        .unwrap_or_else(|| default_magnitude(spec.kind, profile, settings));
    let end = spec.end().min(duration);
    match spec.kind {
        FaultKind::Outlier => {
            // explicit params carry the outlier value itself
            let value = if spec.params.is_empty() {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                profile.mean + sign * magnitude
            } else {
                magnitude
            };
            events.push(SensorEvent::new(spec.start, spec.sensor.clone(), value));
            1
        }
        FaultKind::Spike => {
            let idx = window_indices(events, &spec.sensor, spec.start, end);
            for (n, &i) in idx.iter().enumerate() {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                events[i].value += sign * magnitude;
            }
            idx.len()
        }
        FaultKind::StuckAt => {
            let held = if spec.params.is_empty() {
                events
                    .iter()
                    .rev()
                    .find(|e| e.sensor_id == spec.sensor && e.timestamp < spec.start)
                    .map(|e| e.value)
                    .unwrap_or(magnitude)
            } else {
                magnitude
            };
            let idx = window_indices(events, &spec.sensor, spec.start, end);
            for &i in &idx {
                events[i].value = held;
            }
            idx.len()
        }
        FaultKind::HighNoise => {
            let noise = Normal::new(0.0, magnitude.abs()).expect("finite sigma");
            let idx = window_indices(events, &spec.sensor, spec.start, end);
            for &i in &idx {
                events[i].value += noise.sample(rng);
            }
            idx.len()
        }
        FaultKind::Drift => {
            // explicit params carry the slope; the default spreads the total
            // drift over the window
            let slope = if spec.params.is_empty() {
                magnitude / spec.delta
            } else {
                magnitude
            };
            let idx = window_indices(events, &spec.sensor, spec.start, end);
            for &i in &idx {
                events[i].value += slope * (events[i].timestamp - spec.start);
            }
            idx.len()
        }
        FaultKind::FailStop => fail_stop(events, spec),
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean > 0.0 {
        Poisson::new(mean).expect("positive mean").sample(rng) as usize
    } else {
        0
    }
}

/// Alternating ON/OFF toggles at the given times.
fn toggles(sensor: &str, mut times: Vec<f64>) -> Vec<SensorEvent> {
    times.sort_by(f64::total_cmp);
    times
        .into_iter()
        .enumerate()
        .map(|(i, t)| SensorEvent::new(t, sensor, if i % 2 == 0 { 1.0 } else { 0.0 }))
        .collect()
}

fn activation_pair(sensor: &str, at: f64, duration: f64) -> Vec<SensorEvent> {
    let off = (at + 1.0).min(duration - 1e-6).max(at);
    vec![SensorEvent::new(at, sensor, 1.0), SensorEvent::new(off, sensor, 0.0)]
}

fn inject_binary(
    events: &mut Vec<SensorEvent>,
    spec: &FaultSpec,
    profile: &ChannelProfile,
    settings: &FaultSettings,
    rng: &mut ChaCha8Rng,
    duration: f64,
) -> usize {
    let end = spec.end().min(duration);
    let rate_per_sec = profile.event_rate / 60.0;
    let added: Vec<SensorEvent> = match spec.kind {
        FaultKind::Outlier => activation_pair(&spec.sensor, spec.start, duration),
        FaultKind::Spike => {
            let span = (end - spec.start).min(settings.binary_spike_secs);
            let n = poisson(rng, settings.binary_spike_factor * rate_per_sec * span);
            let times = (0..n).map(|_| spec.start + rng.random::<f64>() * span).collect();
            toggles(&spec.sensor, times)
        }
        FaultKind::StuckAt => {
            let before = events.len();
            events.retain(|e| !(e.sensor_id == spec.sensor && e.timestamp >= spec.start && e.timestamp < end));
            return before - events.len();
        }
        FaultKind::HighNoise => {
            let span = end - spec.start;
            let n = poisson(rng, settings.binary_noise_factor * rate_per_sec * span);
            let times = (0..n).map(|_| spec.start + rng.random::<f64>() * span).collect();
            toggles(&spec.sensor, times)
        }
        FaultKind::Drift => {
            // emission rate ramps linearly from 0 to factor * rate over the
            // window; onset density is proportional to elapsed time
            let span = end - spec.start;
            let expected_emissions = 0.5 * settings.binary_drift_factor * rate_per_sec * span;
            let pairs = poisson(rng, expected_emissions / 2.0);
            (0..pairs)
                .flat_map(|_| {
                    let at = spec.start + span * rng.random::<f64>().sqrt();
                    activation_pair(&spec.sensor, at, duration)
                })
                .collect()
        }
        FaultKind::FailStop => return fail_stop(events, spec),
    };
    let added: Vec<SensorEvent> = added.into_iter().filter(|e| e.timestamp < duration).collect();
    let n = added.len();
    events.extend(added);
    n
}

/// Applies several faults in order.
pub fn inject_all(
    trace: &Trace,
    schema: &HomeSchema,
    specs: &[FaultSpec],
    profiles: &ProfileTable,
    settings: &FaultSettings,
) -> Result<(Trace, Vec<usize>)> {
    let mut current = trace.clone();
    let mut counts = Vec::with_capacity(specs.len());
    for spec in specs {
        let profile = profiles
            .get(&spec.sensor)
            .ok_or_else(|| Error::SensorNotInSchema(spec.sensor.clone()))?;
        let (next, n) = inject(&current, schema, spec, profile, settings)?;
        current = next;
        counts.push(n);
    }
    Ok((current, counts))
}

fn sample_onset(rng: &mut ChaCha8Rng, window: (f64, f64), delta: f64) -> f64 {
    let (t0, t1) = window;
    let hi = t1 - delta;
    if hi > t0 {
        rng.random_range(t0..hi)
    } else {
        t0
    }
}

fn sample_spec(rng: &mut ChaCha8Rng, sensor: &str, window: (f64, f64), settings: &FaultSettings) -> FaultSpec {
    let kind = FaultKind::ALL[rng.random_range(0..FaultKind::ALL.len())];
    let delta = (settings.delta_default_min * 60.0).min(window.1 - window.0);
    let start = sample_onset(rng, window, delta);
    FaultSpec {
        kind,
        sensor: sensor.to_string(),
        start,
        delta,
        params: Vec::new(),
        seed: rng.random(),
        segment: None,
    }
}

/// One fault: uniform sensor, uniform kind, uniform onset in `window`.
pub fn sample_single_fault(
    schema: &HomeSchema,
    window: (f64, f64),
    seed: u64,
    settings: &FaultSettings,
) -> Result<FaultSpec> {
    if schema.is_empty() {
        return Err(Error::InvalidSchema("cannot sample a fault from an empty schema".into()));
    }
    if !(window.1 > window.0) {
        return Err(Error::InvalidConfig("empty evaluation window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = &schema.sensor(rng.random_range(0..schema.len())).sensor_id;
    Ok(sample_spec(&mut rng, sensor, window, settings))
}

/// Several simultaneous faults on distinct sensors; the count is a Poisson
/// draw clipped to `[multi_min, multi_max]` (and to the number of sensors).
pub fn sample_multi_faults(
    schema: &HomeSchema,
    window: (f64, f64),
    seed: u64,
    settings: &FaultSettings,
) -> Result<Vec<FaultSpec>> {
    if schema.is_empty() {
        return Err(Error::InvalidSchema("cannot sample faults from an empty schema".into()));
    }
    if !(window.1 > window.0) {
        return Err(Error::InvalidConfig("empty evaluation window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = sample_fault_count(&mut rng, settings).min(schema.len());
    let chosen = rand::seq::index::sample(&mut rng, schema.len(), count);
    Ok(chosen
        .into_iter()
        .map(|i| {
            let sensor = schema.sensor(i).sensor_id.clone();
            sample_spec(&mut rng, &sensor, window, settings)
        })
        .collect())
}

pub(crate) fn sample_fault_count(rng: &mut ChaCha8Rng, settings: &FaultSettings) -> usize {
    let raw = poisson(rng, settings.multi_lambda);
    raw.clamp(settings.multi_min, settings.multi_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_trace(values: &[f64]) -> (Trace, HomeSchema) {
        let schema = HomeSchema::build(&["b"], &["n"]).unwrap();
        let mut events: Vec<SensorEvent> = values
            .iter()
            .enumerate()
            .map(|(i, v)| SensorEvent::new(i as f64, "n", *v))
            .collect();
        events.push(SensorEvent::new(0.5, "b", 1.0));
        events.push(SensorEvent::new(2.5, "b", 0.0));
        (Trace::new(events, values.len() as f64), schema)
    }

    fn readings(trace: &Trace) -> Vec<f64> {
        trace.events_of("n").map(|e| e.value).collect()
    }

    fn spec(kind: FaultKind, start: f64, delta: f64, params: Vec<f64>) -> FaultSpec {
        FaultSpec {
            kind,
            sensor: "n".into(),
            start,
            delta,
            params,
            seed: 11,
            segment: None,
        }
    }

    fn profile(std: f64) -> ChannelProfile {
        ChannelProfile {
            sensor_id: "n".into(),
            mean: 0.0,
            std,
            event_rate: 60.0,
        }
    }

    #[test]
    fn stuck_at_replaces_window() {
        let (trace, schema) = numeric_trace(&[1.0, 2.0, 3.0, 4.0]);
        let s = spec(FaultKind::StuckAt, 1.0, 2.0, vec![9.0]);
        let (out, n) = inject(&trace, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(readings(&out), vec![1.0, 9.0, 9.0, 4.0]);
        assert_eq!(n, 2);
    }

    #[test]
    fn drift_adds_linear_ramp() {
        let (trace, schema) = numeric_trace(&[0.0; 4]);
        let s = spec(FaultKind::Drift, 1.0, 3.0, vec![0.5]);
        let (out, _) = inject(&trace, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(readings(&out), vec![0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn fail_stop_silences_target_only() {
        let (trace, schema) = numeric_trace(&[1.0, 2.0, 3.0, 4.0]);
        let s = spec(FaultKind::FailStop, 2.0, 1.0, vec![]);
        let (out, n) = inject(&trace, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(readings(&out), vec![1.0, 2.0]);
        assert_eq!(n, 2);
        let others: Vec<_> = out.events_of("b").cloned().collect();
        assert_eq!(others, trace.events_of("b").cloned().collect::<Vec<_>>());
        // already silent: no-op
        let s = spec(FaultKind::FailStop, 3.5, 1.0, vec![]);
        let (again, n) = inject(&out, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(n, 0);
        assert_eq!(again, out);
    }

    #[test]
    fn spike_alternates_sign() {
        let (trace, schema) = numeric_trace(&[5.0; 5]);
        let s = spec(FaultKind::Spike, 1.0, 3.0, vec![2.0]);
        let (out, _) = inject(&trace, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(readings(&out), vec![5.0, 7.0, 3.0, 7.0, 5.0]);
    }

    #[test]
    fn outlier_is_six_sigma_away() {
        let (trace, schema) = numeric_trace(&[0.0; 4]);
        let s = spec(FaultKind::Outlier, 1.5, 0.0, vec![]);
        let (out, n) = inject(&trace, &schema, &s, &profile(2.0), &FaultSettings::default()).unwrap();
        assert_eq!(n, 1);
        let r = readings(&out);
        assert_eq!(r.len(), 5);
        assert_eq!(r[2].abs(), 12.0);
        // zero std falls back to a unit sigma
        let (out, _) = inject(&trace, &schema, &s, &profile(0.0), &FaultSettings::default()).unwrap();
        assert_eq!(readings(&out)[2].abs(), 6.0);
    }

    #[test]
    fn high_noise_floor_and_determinism() {
        let (trace, schema) = numeric_trace(&[0.0; 50]);
        let s = spec(FaultKind::HighNoise, 10.0, 30.0, vec![]);
        let settings = FaultSettings::default();
        let (a, n) = inject(&trace, &schema, &s, &profile(0.0), &settings).unwrap();
        let (b, _) = inject(&trace, &schema, &s, &profile(0.0), &settings).unwrap();
        assert_eq!(a, b);
        assert_eq!(n, 30);
        let r = readings(&a);
        assert!(r[..10].iter().all(|v| *v == 0.0));
        assert!(r[10..40].iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn window_is_clipped_to_trace() {
        let (trace, schema) = numeric_trace(&[0.0; 4]);
        let s = spec(FaultKind::StuckAt, 2.0, 100.0, vec![3.0]);
        let (out, n) = inject(&trace, &schema, &s, &profile(1.0), &FaultSettings::default()).unwrap();
        assert_eq!(n, 2);
        assert_eq!(readings(&out), vec![0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn binary_realizations() {
        let schema = HomeSchema::build(&["b", "c"], &[] as &[&str]).unwrap();
        let mut events = Vec::new();
        for i in 0..600 {
            events.push(SensorEvent::new(i as f64 * 6.0, "b", (i % 2) as f64));
            events.push(SensorEvent::new(i as f64 * 6.0 + 1.0, "c", (i % 2) as f64));
        }
        let trace = Trace::new(events, 3600.0);
        let settings = FaultSettings::default();
        let prof = ChannelProfile {
            sensor_id: "b".into(),
            mean: 0.5,
            std: 0.5,
            event_rate: 10.0,
        };
        let mk = |kind| FaultSpec {
            kind,
            sensor: "b".into(),
            start: 600.0,
            delta: 1800.0,
            params: vec![],
            seed: 3,
            segment: None,
        };
        let count_b = |t: &Trace, lo: f64, hi: f64| {
            t.events_of("b").filter(|e| e.timestamp >= lo && e.timestamp < hi).count()
        };
        let base = count_b(&trace, 600.0, 2400.0);

        let (out, n) = inject(&trace, &schema, &mk(FaultKind::StuckAt), &prof, &settings).unwrap();
        assert_eq!(count_b(&out, 600.0, 2400.0), 0);
        assert_eq!(n, base);

        let (out, n) = inject(&trace, &schema, &mk(FaultKind::Outlier), &prof, &settings).unwrap();
        assert_eq!(n, 2);
        assert_eq!(out.events.len(), trace.events.len() + 2);

        let (out, n) = inject(&trace, &schema, &mk(FaultKind::HighNoise), &prof, &settings).unwrap();
        // 5x of 10/min over 30 min
        assert!((n as f64 - 1500.0).abs() < 200.0, "{n}");
        assert_eq!(count_b(&out, 600.0, 2400.0), base + n);

        let (out, n) = inject(&trace, &schema, &mk(FaultKind::Spike), &prof, &settings).unwrap();
        assert!((n as f64 - 200.0).abs() < 60.0, "{n}");
        assert_eq!(count_b(&out, 720.0, 3600.0), count_b(&trace, 720.0, 3600.0));

        let (out, n) = inject(&trace, &schema, &mk(FaultKind::Drift), &prof, &settings).unwrap();
        // ramp 0 -> 50/min gives 25/min on average
        assert!((n as f64 - 750.0).abs() < 150.0, "{n}");
        let early = count_b(&out, 600.0, 1500.0) - count_b(&trace, 600.0, 1500.0);
        let late = count_b(&out, 1500.0, 2400.0) - count_b(&trace, 1500.0, 2400.0);
        assert!(late > 2 * early);

        for kind in FaultKind::ALL {
            let (out, _) = inject(&trace, &schema, &mk(kind), &prof, &settings).unwrap();
            let c: Vec<_> = out.events_of("c").cloned().collect();
            assert_eq!(c, trace.events_of("c").cloned().collect::<Vec<_>>(), "{kind}");
        }
    }

    #[test]
    fn profiles() {
        let schema = HomeSchema::build(&["b"], &["n"]).unwrap();
        let mut events: Vec<SensorEvent> = (0..30).map(|i| SensorEvent::new(i as f64 * 20.0, "b", (i % 2) as f64)).collect();
        events.extend((0..10).map(|i| SensorEvent::new(i as f64 * 60.0, "n", 5.0)));
        let table = profile_channels(&Trace::new(events, 600.0), &schema).unwrap();
        assert_eq!(table["b"].event_rate, 3.0);
        assert_eq!(table["b"].mean, 0.5);
        assert_eq!(table["n"].mean, 5.0);
        assert_eq!(table["n"].std, 0.0);
        assert!(profile_channels(&Trace::default(), &schema).is_err());
    }

    #[test]
    fn single_sampler() {
        let schema = HomeSchema::build(&["only"], &[] as &[&str]).unwrap();
        let s = FaultSettings::default();
        let a = sample_single_fault(&schema, (0.0, 21_600.0), 5, &s).unwrap();
        assert_eq!(a, sample_single_fault(&schema, (0.0, 21_600.0), 5, &s).unwrap());
        for seed in 0..50 {
            let f = sample_single_fault(&schema, (100.0, 21_600.0), seed, &s).unwrap();
            assert_eq!(f.sensor, "only");
            assert!(f.start >= 100.0 && f.start <= 21_600.0 - 1800.0);
        }
    }

    #[test]
    fn kind_frequencies_are_uniform() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let schema = HomeSchema::build(&ids, &[]).unwrap();
        let s = FaultSettings::default();
        let mut counts = BTreeMap::new();
        for seed in 0..6000 {
            let f = sample_single_fault(&schema, (0.0, 21_600.0), seed, &s).unwrap();
            *counts.entry(f.kind).or_insert(0usize) += 1;
        }
        for kind in FaultKind::ALL {
            let freq = counts[&kind] as f64 / 6000.0;
            assert!((freq - 1.0 / 6.0).abs() <= 0.02, "{kind}: {freq}");
        }
    }

    #[test]
    fn multi_sampler_counts() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let schema = HomeSchema::build(&ids, &[]).unwrap();
        let s = FaultSettings::default();
        let mut total = 0usize;
        for seed in 0..10_000u64 {
            let plan = sample_multi_faults(&schema, (0.0, 2160.0), seed, &s).unwrap();
            assert!((1..=5).contains(&plan.len()));
            let mut sensors: Vec<_> = plan.iter().map(|f| f.sensor.clone()).collect();
            sensors.sort();
            sensors.dedup();
            assert_eq!(sensors.len(), plan.len());
            total += plan.len();
        }
        let mean = total as f64 / 10_000.0;
        assert!((2.7..=3.1).contains(&mean), "{mean}");
    }

    #[test]
    fn kind_names_parse() {
        for kind in FaultKind::ALL {
            assert_eq!(kind.name().parse::<FaultKind>().unwrap(), kind);
        }
        assert!("nope".parse::<FaultKind>().is_err());
    }
}
