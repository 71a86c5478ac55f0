//! Bit-level early fusion of event streams into interval vectors and
//! fixed-length sequence windows.
//!
//! Every sensor gets a 2-bit activity code from its per-interval event count.
//! Numeric sensors get two more bits describing within-interval dynamics:
//! a jumpy bit (volatility above the training baseline) and a burst bit (a
//! single step larger than the typical step).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{HomeSchema, SensorKind, Trace};
use crate::INTERVAL_SECS;

/// Minimum number of one-minute intervals in a calibration trace.
pub const MIN_CALIBRATION_INTERVALS: usize = 100;

/// Per-sensor thresholds learned from the training stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub p25: usize,
    pub p75: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub med_delta: Option<f64>,
}

pub type StatsTable = BTreeMap<String, ChannelStats>;

/// Events of one trace bucketed on the one-minute grid.
///
/// `values[k][tau]` holds the readings of sensor `k` in interval `tau`, in
/// timestamp order.
#[derive(Debug, Clone)]
pub struct IntervalBuckets {
    pub values: Vec<Vec<Vec<f64>>>,
    pub num_intervals: usize,
}

impl IntervalBuckets {
    pub fn new(trace: &Trace, schema: &HomeSchema) -> Self {
        let num_intervals = trace.num_intervals();
        let mut values = vec![vec![Vec::new(); num_intervals]; schema.len()];
        for e in &trace.events {
            let tau = (e.timestamp / INTERVAL_SECS).floor();
            if tau < 0.0 || tau as usize >= num_intervals {
                continue;
            }
            if let Some(k) = schema.index_of(&e.sensor_id) {
                values[k][tau as usize].push(e.value);
            }
        }
        IntervalBuckets { values, num_intervals }
    }

    pub fn count(&self, sensor: usize, tau: usize) -> usize {
        self.values[sensor][tau].len()
    }
}

/// Nearest-rank percentile of an already sorted, non-empty slice.
pub fn nearest_rank(sorted: &[usize], pct: f64) -> usize {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn diffs(values: &[f64]) -> impl Iterator<Item = f64> + '_ {
    values.windows(2).map(|w| w[1] - w[0])
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn calibrate_stats(trace: &Trace, schema: &HomeSchema) -> Result<StatsTable> {
    let buckets = IntervalBuckets::new(trace, schema);
    if buckets.num_intervals < MIN_CALIBRATION_INTERVALS {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least {MIN_CALIBRATION_INTERVALS} one-minute intervals, got {}",
            buckets.num_intervals
        )));
    }
    let mut table = StatsTable::new();
    for (k, sensor) in schema.sensors().iter().enumerate() {
        let mut counts: Vec<usize> = buckets.values[k].iter().map(Vec::len).filter(|&m| m > 0).collect();
        counts.sort_unstable();
        let (p25, p75) = if counts.is_empty() {
            log::warn!("sensor `{}` is silent in the calibration trace", sensor.sensor_id);
            (0, 0)
        } else {
            (nearest_rank(&counts, 25.0), nearest_rank(&counts, 75.0))
        };
        let (sigma_delta, med_delta) = match sensor.kind {
            SensorKind::Binary => (None, None),
            SensorKind::Numeric => {
                let pooled: Vec<f64> = buckets.values[k].iter().flat_map(|v| diffs(v)).collect();
                if pooled.is_empty() {
                    log::warn!(
                        "numeric sensor `{}` never has two readings in one interval",
                        sensor.sensor_id
                    );
                }
                let mut abs: Vec<f64> = pooled.iter().map(|d| d.abs()).collect();
                (Some(population_std(&pooled)), Some(median(&mut abs)))
            }
        };
        table.insert(
            sensor.sensor_id.clone(),
            ChannelStats {
                p25,
                p75,
                sigma_delta,
                med_delta,
            },
        );
    }
    Ok(table)
}

/// Two-bit activity code for an interval with `m` events.
pub fn activity_bits(m: usize, stats: &ChannelStats) -> [u8; 2] {
    if m == 0 {
        [0, 0]
    } else if m < stats.p25 {
        [0, 1]
    } else if m < stats.p75 {
        [1, 0]
    } else {
        [1, 1]
    }
}

/// Jumpy and burst bits for the readings of one numeric sensor in one
/// interval.
pub fn dynamics_bits(values: &[f64], stats: &ChannelStats) -> [u8; 2] {
    if values.len() < 2 {
        return [0, 0];
    }
    let d: Vec<f64> = diffs(values).collect();
    let jumpy = population_std(&d) > stats.sigma_delta.unwrap_or(0.0);
    let burst = d.iter().map(|x| x.abs()).fold(0.0, f64::max) > stats.med_delta.unwrap_or(0.0);
    [jumpy as u8, burst as u8]
}

/// Calibration statistics in schema order; errors if a sensor has none.
pub fn stats_by_index<'a>(stats: &'a StatsTable, schema: &HomeSchema) -> Result<Vec<&'a ChannelStats>> {
    schema
        .sensors()
        .iter()
        .map(|s| {
            stats
                .get(&s.sensor_id)
                .ok_or_else(|| Error::InvalidConfig(format!("no calibration stats for `{}`", s.sensor_id)))
        })
        .collect()
}

/// Writes the fused bits of one interval into `out` (length `D`).
/// `readings[k]` holds the readings of sensor `k`.
pub fn encode_interval(readings: &[&[f64]], stats: &[&ChannelStats], schema: &HomeSchema, out: &mut [u8]) {
    debug_assert_eq!(out.len(), schema.width());
    for (k, sensor) in schema.sensors().iter().enumerate() {
        let vals = readings.get(k).copied().unwrap_or(&[]);
        let o = sensor.bit_offset;
        out[o..o + 2].copy_from_slice(&activity_bits(vals.len(), stats[k]));
        if sensor.kind == SensorKind::Numeric {
            out[o + 2..o + 4].copy_from_slice(&dynamics_bits(vals, stats[k]));
        }
    }
}

/// All interval vectors of a trace, stored row-major so that any window of
/// consecutive intervals is one contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStream {
    pub width: usize,
    pub num_intervals: usize,
    pub bits: Vec<u8>,
}

/// `L` consecutive interval vectors starting at `start_tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceWindow<'a> {
    pub start_tau: usize,
    pub width: usize,
    pub bits: &'a [u8],
}

impl SequenceWindow<'_> {
    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.width..(i + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl EncodedStream {
    pub fn interval(&self, tau: usize) -> &[u8] {
        &self.bits[tau * self.width..(tau + 1) * self.width]
    }

    pub fn num_windows(&self, len: usize) -> usize {
        (self.num_intervals + 1).saturating_sub(len)
    }

    pub fn window(&self, start_tau: usize, len: usize) -> SequenceWindow<'_> {
        SequenceWindow {
            start_tau,
            width: self.width,
            bits: &self.bits[start_tau * self.width..(start_tau + len) * self.width],
        }
    }

    /// Unit-stride windows of length `len`.
    pub fn windows(&self, len: usize) -> impl Iterator<Item = SequenceWindow<'_>> + '_ {
        (0..self.num_windows(len)).map(move |s| self.window(s, len))
    }
}

pub fn encode_stream(trace: &Trace, stats: &StatsTable, schema: &HomeSchema) -> Result<EncodedStream> {
    let per_sensor = stats_by_index(stats, schema)?;
    let buckets = IntervalBuckets::new(trace, schema);
    let width = schema.width();
    let mut bits = vec![0u8; buckets.num_intervals * width];
    let mut readings: Vec<&[f64]> = vec![&[]; schema.len()];
    for tau in 0..buckets.num_intervals {
        for (k, r) in readings.iter_mut().enumerate() {
            *r = &buckets.values[k][tau];
        }
        encode_interval(&readings, &per_sensor, schema, &mut bits[tau * width..(tau + 1) * width]);
    }
    Ok(EncodedStream {
        width,
        num_intervals: buckets.num_intervals,
        bits,
    })
}

/// Mean co-activation probability of correlated pairs minus that of
/// uncorrelated pairs, over all unit-stride windows of `window_len` intervals.
pub fn coactivation_gap(
    trace: &Trace,
    correlated: &[(String, String)],
    uncorrelated: &[(String, String)],
    window_len: usize,
) -> Result<f64> {
    if window_len < 1 {
        return Err(Error::InvalidConfig("window length must be at least 1".into()));
    }
    if correlated.is_empty() || uncorrelated.is_empty() {
        return Err(Error::InvalidConfig("pair lists must be non-empty".into()));
    }
    let n = trace.num_intervals();
    if n < window_len {
        return Err(Error::InsufficientData("trace shorter than the window".into()));
    }
    let mut active: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for (a, b) in correlated.iter().chain(uncorrelated) {
        active.entry(a).or_insert_with(|| vec![false; n]);
        active.entry(b).or_insert_with(|| vec![false; n]);
    }
    for e in &trace.events {
        let tau = (e.timestamp / INTERVAL_SECS).floor() as usize;
        if tau < n {
            if let Some(row) = active.get_mut(e.sensor_id.as_str()) {
                row[tau] = true;
            }
        }
    }
    // prefix counts give window activity in O(1)
    let prefix: BTreeMap<&str, Vec<u32>> = active
        .iter()
        .map(|(id, row)| {
            let mut p = vec![0u32; n + 1];
            for (i, &on) in row.iter().enumerate() {
                p[i + 1] = p[i] + on as u32;
            }
            (*id, p)
        })
        .collect();
    let windows = n - window_len + 1;
    let prob = |pairs: &[(String, String)]| {
        let total: f64 = pairs
            .iter()
            .map(|(a, b)| {
                let (pa, pb) = (&prefix[a.as_str()], &prefix[b.as_str()]);
                let joint = (0..windows)
                    .filter(|&s| pa[s + window_len] > pa[s] && pb[s + window_len] > pb[s])
                    .count();
                joint as f64 / windows as f64
            })
            .sum();
        total / pairs.len() as f64
    };
    Ok(prob(correlated) - prob(uncorrelated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::SensorEvent;
    use proptest::prelude::*;

    fn stats(p25: usize, p75: usize) -> ChannelStats {
        ChannelStats {
            p25,
            p75,
            sigma_delta: Some(0.0),
            med_delta: Some(0.0),
        }
    }

    #[test]
    fn nearest_rank_percentiles() {
        assert_eq!(nearest_rank(&[1, 2, 3, 4], 25.0), 1);
        assert_eq!(nearest_rank(&[1, 2, 3, 4], 75.0), 3);
        assert_eq!(nearest_rank(&[7], 25.0), 7);
    }

    #[test]
    fn activity_code_table() {
        let s = stats(2, 8);
        assert_eq!(activity_bits(0, &s), [0, 0]);
        assert_eq!(activity_bits(1, &s), [0, 1]);
        assert_eq!(activity_bits(5, &s), [1, 0]);
        assert_eq!(activity_bits(9, &s), [1, 1]);
        assert_eq!(activity_bits(3, &stats(0, 0)), [1, 1]);
    }

    #[test]
    fn constant_readings_have_no_dynamics() {
        assert_eq!(dynamics_bits(&[10.0, 10.0, 10.0], &stats(1, 1)), [0, 0]);
        assert_eq!(dynamics_bits(&[10.0], &stats(1, 1)), [0, 0]);
        let s = ChannelStats {
            p25: 1,
            p75: 2,
            sigma_delta: Some(1.0),
            med_delta: Some(1.0),
        };
        // diffs 5, -5: std 5 > 1, max |d| 5 > 1
        assert_eq!(dynamics_bits(&[0.0, 5.0, 0.0], &s), [1, 1]);
        // diffs 2, 2: std 0, max 2
        assert_eq!(dynamics_bits(&[0.0, 2.0, 4.0], &s), [0, 1]);
        // negative steps count as bursts
        assert_eq!(dynamics_bits(&[4.0, 2.0], &s), [0, 1]);
    }

    fn calibration_trace() -> (Trace, HomeSchema) {
        let schema = HomeSchema::build(&["b", "quiet"], &["n", "flat"]).unwrap();
        let mut events = Vec::new();
        // b: counts 1,2,3,4 repeated over active minutes, silent in between
        for tau in 0..120 {
            let m = if tau % 2 == 0 { tau / 2 % 4 + 1 } else { 0 };
            for i in 0..m {
                events.push(SensorEvent::new(tau as f64 * 60.0 + i as f64, "b", (i % 2) as f64));
            }
            for (i, v) in [0.0, 1.0, 3.0].iter().enumerate() {
                events.push(SensorEvent::new(tau as f64 * 60.0 + 10.0 * i as f64, "n", *v));
            }
            events.push(SensorEvent::new(tau as f64 * 60.0 + 5.0, "flat", 4.0));
            events.push(SensorEvent::new(tau as f64 * 60.0 + 6.0, "flat", 4.0));
        }
        (Trace::new(events, 120.0 * 60.0), schema)
    }

    #[test]
    fn calibration_values() {
        let (trace, schema) = calibration_trace();
        let table = calibrate_stats(&trace, &schema).unwrap();
        assert_eq!((table["b"].p25, table["b"].p75), (1, 3));
        assert_eq!(table["b"].sigma_delta, None);
        assert_eq!((table["quiet"].p25, table["quiet"].p75), (0, 0));
        assert_eq!((table["flat"].sigma_delta, table["flat"].med_delta), (Some(0.0), Some(0.0)));
        // pooled diffs are 1 and 2 in equal share
        assert_eq!(table["n"].sigma_delta, Some(0.5));
        assert_eq!(table["n"].med_delta, Some(1.5));
        let json = serde_json::to_string(&table).unwrap();
        let back: StatsTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn calibration_needs_enough_intervals() {
        let (trace, schema) = calibration_trace();
        let short = trace.slice(0.0, 99.0 * 60.0);
        assert!(matches!(calibrate_stats(&short, &schema), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn stream_windows() {
        let (trace, schema) = calibration_trace();
        let table = calibrate_stats(&trace, &schema).unwrap();
        let ten = trace.slice(0.0, 600.0);
        let stream = encode_stream(&ten, &table, &schema).unwrap();
        let windows: Vec<_> = stream.windows(5).collect();
        assert_eq!(windows.len(), 6);
        assert_eq!(windows.iter().map(|w| w.start_tau).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
        for pair in windows.windows(2) {
            for r in 1..5 {
                assert_eq!(pair[0].row(r), pair[1].row(r - 1));
            }
        }
        // quiet sensor never fires; b fires only on even minutes
        assert_eq!(stream.interval(1)[0..4], [0, 0, 0, 0]);
        assert_eq!(stream.interval(0)[0..2], [1u8, 0]);
        let short = trace.slice(0.0, 240.0);
        assert_eq!(encode_stream(&short, &table, &schema).unwrap().windows(5).count(), 0);
    }

    #[test]
    fn silent_stream_is_zero() {
        let schema = HomeSchema::build(&["a"], &["n"]).unwrap();
        let table: StatsTable = [("a", stats(1, 2)), ("n", stats(1, 2))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let stream = encode_stream(&Trace::new(vec![], 900.0), &table, &schema).unwrap();
        assert!(stream.windows(5).all(|w| w.bits.iter().all(|&b| b == 0)));
        assert_eq!(stream.windows(5).count(), 11);
    }

    #[test]
    fn missing_stats_is_an_error() {
        let schema = HomeSchema::build(&["a"], &[] as &[&str]).unwrap();
        assert!(encode_stream(&Trace::new(vec![], 600.0), &StatsTable::new(), &schema).is_err());
    }

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    #[test]
    fn gap_extremes() {
        let mut events = Vec::new();
        for tau in 0..30 {
            let t = tau as f64 * 60.0;
            events.push(SensorEvent::new(t, "a", 1.0));
            events.push(SensorEvent::new(t + 1.0, "b", 1.0));
        }
        events.push(SensorEvent::new(0.0, "c", 1.0));
        let trace = Trace::new(events, 1800.0);
        let gap = coactivation_gap(&trace, &[pair("a", "b")], &[pair("a", "d")], 5).unwrap();
        assert_eq!(gap, 1.0);
        let same = [pair("a", "b"), pair("a", "c")];
        assert_eq!(coactivation_gap(&trace, &same, &same, 3).unwrap(), 0.0);
        assert!(coactivation_gap(&trace, &same, &same, 0).is_err());
    }

    proptest! {
        #[test]
        fn activity_code_is_monotone(p25 in 0usize..20, extra in 0usize..20, m in 0usize..60) {
            let s = stats(p25, p25 + extra);
            let code = |m| { let b = activity_bits(m, &s); 2 * b[0] + b[1] };
            prop_assert!(code(m) <= code(m + 1));
        }

        #[test]
        fn encoded_bits_are_binary_and_order_free(
            counts in proptest::collection::vec(0usize..6, 12),
            shuffle_seed in any::<u64>(),
        ) {
            let schema = HomeSchema::build(&["a", "b", "c"], &["n"]).unwrap();
            let ids = ["a", "b", "c", "n"];
            let mut events = Vec::new();
            for (i, &m) in counts.iter().enumerate() {
                let tau = i / 4;
                for j in 0..m {
                    events.push(SensorEvent::new(tau as f64 * 60.0 + j as f64, ids[i % 4], j as f64));
                }
            }
            let table: StatsTable = ids.iter().map(|k| (k.to_string(), stats(2, 4))).collect();
            let trace = Trace::new(events.clone(), 300.0);
            let a = encode_stream(&trace, &table, &schema).unwrap();
            prop_assert!(a.bits.iter().all(|&b| b <= 1));
            prop_assert_eq!(a.bits.len(), 5 * schema.width());
            // permuting the binary events within an interval leaves the bits unchanged
            use rand::{SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed);
            let (mut bin, num): (Vec<_>, Vec<_>) = events.into_iter().partition(|e| e.sensor_id != "n");
            bin.shuffle(&mut rng);
            for e in &mut bin { e.timestamp = (e.timestamp / 60.0).floor() * 60.0 + 30.0; }
            bin.extend(num);
            let b = encode_stream(&Trace::new(bin, 300.0), &table, &schema).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
