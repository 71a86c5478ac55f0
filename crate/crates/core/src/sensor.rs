//! Sensor inventory, event streams and the CASAS-style trace format.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::INTERVAL_SECS;

/// Bits per binary channel in the fused interval vector.
pub const BINARY_BITS: usize = 2;
/// Bits per numeric channel in the fused interval vector.
pub const NUMERIC_BITS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorKind {
    Binary,
    Numeric,
}

impl SensorKind {
    pub fn bit_width(self) -> usize {
        match self {
            SensorKind::Binary => BINARY_BITS,
            SensorKind::Numeric => NUMERIC_BITS,
        }
    }
}

/// One channel of the inventory together with its slot `I_k` in the fused
/// bit vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSchema {
    pub sensor_id: String,
    pub kind: SensorKind,
    pub bit_offset: usize,
    pub bit_width: usize,
}

impl SensorSchema {
    pub fn bits(&self) -> std::ops::Range<usize> {
        self.bit_offset..self.bit_offset + self.bit_width
    }
}

/// Ordered sensor inventory. Binary sensors come first, then numeric ones,
/// each in listed order; bit slots tile `[0, D)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HomeSchema {
    sensors: Vec<SensorSchema>,
    index: HashMap<String, usize>,
    width: usize,
}

/// On-disk schema representation: `{"binary": [...], "numeric": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaFile {
    #[serde(default)]
    pub binary: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<String>,
}

impl HomeSchema {
    pub fn build<S: AsRef<str>>(binary_ids: &[S], numeric_ids: &[S]) -> Result<Self> {
        if binary_ids.is_empty() && numeric_ids.is_empty() {
            return Err(Error::InvalidSchema("no sensors listed".into()));
        }
        Self::build_allow_empty(binary_ids, numeric_ids)
    }

    fn build_allow_empty<S: AsRef<str>>(binary_ids: &[S], numeric_ids: &[S]) -> Result<Self> {
        let mut sensors = Vec::with_capacity(binary_ids.len() + numeric_ids.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        let listed = binary_ids
            .iter()
            .map(|id| (id.as_ref(), SensorKind::Binary))
            .chain(numeric_ids.iter().map(|id| (id.as_ref(), SensorKind::Numeric)));
        for (id, kind) in listed {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::InvalidSchema(format!("invalid sensor id `{id}`")));
            }
            if index.insert(id.to_string(), sensors.len()).is_some() {
                return Err(Error::DuplicateSensor(id.to_string()));
            }
            let bit_width = kind.bit_width();
            sensors.push(SensorSchema {
                sensor_id: id.to_string(),
                kind,
                bit_offset: offset,
                bit_width,
            });
            offset += bit_width;
        }
        Ok(HomeSchema {
            sensors,
            index,
            width: offset,
        })
    }

    /// Total fused bit width `D`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[SensorSchema] {
        &self.sensors
    }

    pub fn sensor(&self, idx: usize) -> &SensorSchema {
        &self.sensors[idx]
    }

    pub fn index_of(&self, sensor_id: &str) -> Option<usize> {
        self.index.get(sensor_id).copied()
    }

    pub fn get(&self, sensor_id: &str) -> Option<&SensorSchema> {
        self.index_of(sensor_id).map(|i| &self.sensors[i])
    }

    pub fn count(&self, kind: SensorKind) -> usize {
        self.sensors.iter().filter(|s| s.kind == kind).count()
    }

    pub fn to_file(&self) -> SchemaFile {
        let ids = |kind| {
            self.sensors
                .iter()
                .filter(|s| s.kind == kind)
                .map(|s| s.sensor_id.clone())
                .collect()
        };
        SchemaFile {
            binary: ids(SensorKind::Binary),
            numeric: ids(SensorKind::Numeric),
        }
    }

    pub fn from_file(file: &SchemaFile) -> Result<Self> {
        Self::build(&file.binary, &file.numeric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }
}

impl Serialize for HomeSchema {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_file().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HomeSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = SchemaFile::deserialize(deserializer)?;
        HomeSchema::build_allow_empty(&file.binary, &file.numeric).map_err(serde::de::Error::custom)
    }
}

/// `value` is 1.0/0.0 (active/inactive) for binary channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub timestamp: f64,
    pub sensor_id: String,
    pub value: f64,
}

impl SensorEvent {
    pub fn new(timestamp: f64, sensor_id: impl Into<String>, value: f64) -> Self {
        SensorEvent {
            timestamp,
            sensor_id: sensor_id.into(),
            value,
        }
    }
}

/// Time-ordered event stream. Timestamps are seconds from the stream origin
/// and lie in `[0, duration)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<SensorEvent>,
    pub duration: f64,
}

impl Trace {
    /// Builds a trace, stable-sorting events by timestamp.
    pub fn new(mut events: Vec<SensorEvent>, duration: f64) -> Self {
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Trace { events, duration }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of complete intervals on the one-minute grid.
    pub fn num_intervals(&self) -> usize {
        (self.duration / INTERVAL_SECS).floor().max(0.0) as usize
    }

    /// Events in `[start, end)`, re-based so that `start` becomes time zero.
    pub fn slice(&self, start: f64, end: f64) -> Trace {
        let lo = self.events.partition_point(|e| e.timestamp < start);
        let hi = self.events.partition_point(|e| e.timestamp < end);
        let events = self.events[lo..hi]
            .iter()
            .map(|e| SensorEvent {
                timestamp: e.timestamp - start,
                sensor_id: e.sensor_id.clone(),
                value: e.value,
            })
            .collect();
        Trace {
            events,
            duration: end - start,
        }
    }

    /// Events of one sensor, in order.
    pub fn events_of<'a>(&'a self, sensor_id: &'a str) -> impl Iterator<Item = &'a SensorEvent> + 'a {
        self.events.iter().filter(move |e| e.sensor_id == sensor_id)
    }

    /// Checks ordering, range and schema membership invariants.
    pub fn validate(&self, schema: &HomeSchema) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !e.timestamp.is_finite() || !e.value.is_finite() {
                return Err(Error::NonFinite(format!("event {i}")));
            }
            if e.timestamp < prev {
                return Err(Error::InvalidConfig(format!("event {i} out of order")));
            }
            if e.timestamp < 0.0 || e.timestamp >= self.duration {
                return Err(Error::InvalidConfig(format!(
                    "event {i} at {} outside [0, {})",
                    e.timestamp, self.duration
                )));
            }
            let sensor = schema
                .get(&e.sensor_id)
                .ok_or_else(|| Error::SensorNotInSchema(e.sensor_id.clone()))?;
            if sensor.kind == SensorKind::Binary && e.value != 0.0 && e.value != 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "binary sensor `{}` has value {}",
                    e.sensor_id, e.value
                )));
            }
            prev = e.timestamp;
        }
        Ok(())
    }
}

const ORIGIN_DIRECTIVE: &str = "# origin ";
const DURATION_DIRECTIVE: &str = "# duration ";
const DATETIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S%.f";

fn value_token(token: &str) -> Option<f64> {
    match token.to_ascii_uppercase().as_str() {
        "ON" | "OPEN" | "PRESENT" => Some(1.0),
        "OFF" | "CLOSE" | "CLOSED" | "ABSENT" => Some(0.0),
        _ => None,
    }
}

fn parse_datetime(date: &str, time: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(&format!("{date} {time}"), DATETIME_FORMAT).ok()
}

fn seconds_between(origin: NaiveDateTime, t: NaiveDateTime) -> f64 {
    let delta = t - origin;
    delta.num_seconds() as f64 + f64::from(delta.subsec_nanos()) / 1e9
}

struct RawEvent {
    at: NaiveDateTime,
    sensor: String,
    value: f64,
    symbolic: bool,
}

/// Parses a CASAS-style event log.
///
/// Each non-empty, non-comment line reads `DATE TIME SENSOR VALUE [annotations...]`.
/// Without a schema one is inferred: a sensor is numeric iff some value of it
/// parsed to a real outside `{0, 1}`. Timestamps are re-based to the earliest
/// event unless the file carries a `# origin` directive (written by
/// [`serialize_trace`]).
pub fn parse_trace(text: &str, schema: Option<&HomeSchema>) -> Result<(Trace, HomeSchema)> {
    let mut raw: Vec<RawEvent> = Vec::new();
    let mut origin: Option<NaiveDateTime> = None;
    let mut declared_duration: Option<f64> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(rest) = trimmed.strip_prefix(ORIGIN_DIRECTIVE) {
                let mut parts = rest.split_whitespace();
                let parsed = match (parts.next(), parts.next()) {
                    (Some(d), Some(t)) => parse_datetime(d, t),
                    _ => None,
                };
                origin = Some(parsed.ok_or_else(|| Error::MalformedLine {
                    line: line_no,
                    reason: "bad origin directive".into(),
                })?);
            } else if let Some(rest) = trimmed.strip_prefix(DURATION_DIRECTIVE) {
                declared_duration =
                    Some(rest.trim().parse::<f64>().map_err(|_| Error::MalformedLine {
                        line: line_no,
                        reason: "bad duration directive".into(),
                    })?);
            }
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() < 4 {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("expected at least 4 fields, found {}", tokens.len()),
            });
        }
        let at = parse_datetime(tokens[0], tokens[1]).ok_or_else(|| Error::MalformedLine {
            line: line_no,
            reason: format!("bad timestamp `{} {}`", tokens[0], tokens[1]),
        })?;
        let sensor = tokens[2];
        if let Some(schema) = schema {
            if schema.index_of(sensor).is_none() {
                return Err(Error::UnknownSensor {
                    line: line_no,
                    sensor: sensor.to_string(),
                });
            }
        }
        let (value, symbolic) = match value_token(tokens[3]) {
            Some(v) => (v, true),
            None => {
                let v = tokens[3].parse::<f64>().map_err(|_| Error::BadValue {
                    line: line_no,
                    token: tokens[3].to_string(),
                })?;
                if !v.is_finite() {
                    return Err(Error::BadValue {
                        line: line_no,
                        token: tokens[3].to_string(),
                    });
                }
                (v, false)
            }
        };
        raw.push(RawEvent {
            at,
            sensor: sensor.to_string(),
            value,
            symbolic,
        });
    }

    let schema = match schema {
        Some(s) => s.clone(),
        None => infer_schema(&raw)?,
    };
    let Some(first) = raw.iter().map(|e| e.at).min() else {
        return Ok((
            Trace {
                events: Vec::new(),
                duration: declared_duration.unwrap_or(0.0),
            },
            schema,
        ));
    };
    let origin = origin.unwrap_or(first);
    let events: Vec<SensorEvent> = raw
        .into_iter()
        .map(|e| SensorEvent {
            timestamp: seconds_between(origin, e.at),
            sensor_id: e.sensor,
            value: e.value,
        })
        .collect();
    if let Some(e) = events.iter().find(|e| e.timestamp < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "event of `{}` precedes the declared origin",
            e.sensor_id
        )));
    }
    let last = events.iter().map(|e| e.timestamp).fold(0.0, f64::max);
    let duration = match declared_duration {
        Some(d) if d > last => d,
        _ => ((last / INTERVAL_SECS).floor() + 1.0) * INTERVAL_SECS,
    };
    Ok((Trace::new(events, duration), schema))
}

fn infer_schema(raw: &[RawEvent]) -> Result<HomeSchema> {
    let mut order: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    let mut numeric = HashSet::new();
    for e in raw {
        if seen.insert(e.sensor.as_str()) {
            order.push(&e.sensor);
        }
        if !e.symbolic && e.value != 0.0 && e.value != 1.0 {
            numeric.insert(e.sensor.as_str());
        }
    }
    let binary: Vec<&str> = order.iter().copied().filter(|s| !numeric.contains(s)).collect();
    let numeric: Vec<&str> = order.iter().copied().filter(|s| numeric.contains(s)).collect();
    HomeSchema::build_allow_empty(&binary, &numeric)
}

/// Default wall-clock anchor used when writing traces.
pub fn default_origin() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2000, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid constant date")
}

/// Writes a trace in the format accepted by [`parse_trace`].
///
/// The origin and duration are recorded as `#` directives so that a parsed
/// copy keeps the same interval grid.
pub fn serialize_trace(trace: &Trace, schema: &HomeSchema, origin: NaiveDateTime) -> String {
    let mut out = String::with_capacity(trace.events.len() * 40 + 64);
    let _ = writeln!(out, "{ORIGIN_DIRECTIVE}{}", origin.format("%Y-%m-%d %H:%M:%S%.9f"));
    let _ = writeln!(out, "{DURATION_DIRECTIVE}{}", trace.duration);
    for e in &trace.events {
        let nanos = (e.timestamp * 1e9).round() as i64;
        let at = origin + chrono::Duration::nanoseconds(nanos);
        let binary = schema
            .get(&e.sensor_id)
            .map(|s| s.kind == SensorKind::Binary)
            .unwrap_or(false);
        let _ = write!(out, "{} {} ", at.format("%Y-%m-%d %H:%M:%S%.9f"), e.sensor_id);
        if binary {
            out.push_str(if e.value != 0.0 { "ON" } else { "OFF" });
        } else {
            let _ = write!(out, "{}", e.value);
        }
        out.push('\n');
    }
    out
}
