//! Synthetic multi-resident smart-home traces.
//!
//! Residents wander between rooms following independent Markov schedules with
//! exponential dwell times. While a room is occupied its binary sensors fire
//! ON/OFF pairs; numeric channels report a slowly varying daily signal with
//! AR(1) noise every few seconds regardless of occupancy. Sensors sharing a
//! room are therefore correlated, sensors in different rooms are not.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{HomeSchema, SensorEvent, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rooms: usize,
    pub binary_per_room: usize,
    pub numeric_channels: usize,
    pub n_residents: usize,
    pub duration_hours: f64,
    pub seed: u64,
    /// Mean room dwell time, minutes.
    pub mean_dwell_min: f64,
    /// ON/OFF pairs per minute emitted by an occupied room (spread uniformly
    /// over the room's binary sensors).
    pub room_rate_per_min: f64,
    /// Mean ON duration of a binary activation, seconds.
    pub mean_on_secs: f64,
    /// Sampling period of numeric channels, seconds.
    pub numeric_period_secs: f64,
    pub ar_coeff: f64,
    pub noise_sigma: f64,
    /// Amplitude of the daily sinusoid on numeric channels.
    pub numeric_amplitude: f64,
    /// Reporting resolution of numeric channels; 0 disables quantization.
    pub numeric_resolution: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_rooms: 4,
            binary_per_room: 2,
            numeric_channels: 2,
            n_residents: 2,
            duration_hours: 78.0,
            seed: 1,
            mean_dwell_min: 20.0,
            room_rate_per_min: 2.0,
            mean_on_secs: 3.0,
            numeric_period_secs: 15.0,
            ar_coeff: 0.9,
            noise_sigma: 0.1,
            numeric_amplitude: 60.0,
            numeric_resolution: 10.0,
        }
    }
}

/// One uninterrupted stay of a resident in a room.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomStay {
    pub resident: usize,
    pub room: usize,
    pub start: f64,
    pub end: f64,
}

/// Occupancy ground truth plus the room layout of the binary sensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthActivityLog {
    pub stays: Vec<RoomStay>,
    /// Binary sensor ids per room.
    pub rooms: Vec<Vec<String>>,
    pub numeric: Vec<String>,
}

/// Correlated (same-room) and uncorrelated (cross-room) binary sensor pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorPairs {
    pub correlated: Vec<(String, String)>,
    pub uncorrelated: Vec<(String, String)>,
}

impl GroundTruthActivityLog {
    pub fn room_of(&self, sensor_id: &str) -> Option<usize> {
        self.rooms.iter().position(|r| r.iter().any(|s| s == sensor_id))
    }

    pub fn sensor_pairs(&self) -> SensorPairs {
        let mut pairs = SensorPairs::default();
        let all: Vec<(usize, &String)> = self
            .rooms
            .iter()
            .enumerate()
            .flat_map(|(r, ids)| ids.iter().map(move |id| (r, id)))
            .collect();
        for (i, (ra, a)) in all.iter().enumerate() {
            for (rb, b) in &all[i + 1..] {
                let pair = ((*a).clone(), (*b).clone());
                if ra == rb {
                    pairs.correlated.push(pair);
                } else {
                    pairs.uncorrelated.push(pair);
                }
            }
        }
        pairs
    }
}

pub fn binary_sensor_id(room: usize, idx: usize) -> String {
    format!("R{room}_M{idx:02}")
}

pub fn numeric_sensor_id(idx: usize) -> String {
    format!("N{idx:02}")
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.duration_hours <= 0.0 || !self.duration_hours.is_finite() {
            return Err(Error::InvalidConfig("synthetic duration must be positive".into()));
        }
        if self.duration_hours < 1.0 {
            return Err(Error::InvalidConfig("synthetic duration must be at least 1 h".into()));
        }
        if self.n_rooms == 0 || self.binary_per_room == 0 || self.numeric_channels == 0 || self.n_residents == 0 {
            return Err(Error::InvalidConfig("all synthetic counts must be >= 1".into()));
        }
        let positive = [
            self.mean_dwell_min,
            self.room_rate_per_min,
            self.mean_on_secs,
            self.numeric_period_secs,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("synthetic rates and periods must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ar_coeff.abs()) || self.noise_sigma < 0.0 || self.numeric_resolution < 0.0 {
            return Err(Error::InvalidConfig("invalid numeric channel parameters".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic_trace(config: &SynthConfig) -> Result<(Trace, HomeSchema, GroundTruthActivityLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let duration = config.duration_hours * 3600.0;

    let rooms: Vec<Vec<String>> = (0..config.n_rooms)
        .map(|r| (0..config.binary_per_room).map(|i| binary_sensor_id(r, i)).collect())
        .collect();
    let numeric: Vec<String> = (0..config.numeric_channels).map(numeric_sensor_id).collect();
    let binary_ids: Vec<String> = rooms.iter().flatten().cloned().collect();
    let schema = HomeSchema::build(&binary_ids, &numeric)?;

    let dwell = Exp::new(1.0 / (config.mean_dwell_min * 60.0)).expect("positive rate");
    let on_len = Exp::new(1.0 / config.mean_on_secs).expect("positive rate");

    let mut stays = Vec::new();
    for resident in 0..config.n_residents {
        let mut t = 0.0;
        let mut room = rng.random_range(0..config.n_rooms);
        while t < duration {
            let end = (t + dwell.sample(&mut rng)).min(duration);
            stays.push(RoomStay {
                resident,
                room,
                start: t,
                end,
            });
            t = end;
            if config.n_rooms > 1 {
                room = (room + rng.random_range(1..config.n_rooms)) % config.n_rooms;
            }
        }
    }

    let mut events = Vec::new();
    for stay in &stays {
        let expected = config.room_rate_per_min * (stay.end - stay.start) / 60.0;
        let n = if expected > 0.0 {
            Poisson::new(expected).expect("positive mean").sample(&mut rng) as usize
        } else {
            0
        };
        for _ in 0..n {
            let on = rng.random_range(stay.start..stay.end);
            let off = on + on_len.sample(&mut rng);
            let sensor = &rooms[stay.room][rng.random_range(0..config.binary_per_room)];
            if off < duration {
                events.push(SensorEvent::new(on, sensor.clone(), 1.0));
                events.push(SensorEvent::new(off, sensor.clone(), 0.0));
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma).expect("finite sigma");
    for id in &numeric {
        let phase = rng.random_range(0.0..2.0 * PI);
        let level = config.numeric_amplitude * 2.0 + rng.random_range(0.0..config.numeric_amplitude.max(1.0));
        let stationary = config.noise_sigma / (1.0 - config.ar_coeff * config.ar_coeff).sqrt();
        let mut ar = if stationary > 0.0 {
            Normal::new(0.0, stationary).expect("finite sigma").sample(&mut rng)
        } else {
            0.0
        };
        let mut k = 0u64;
        loop {
            let t = k as f64 * config.numeric_period_secs;
            if t >= duration {
                break;
            }
            let raw = level + config.numeric_amplitude * (2.0 * PI * t / 86_400.0 + phase).sin() + ar;
            let value = if config.numeric_resolution > 0.0 {
                (raw / config.numeric_resolution).round() * config.numeric_resolution
            } else {
                raw
            };
            events.push(SensorEvent::new(t, id.clone(), value));
            ar = config.ar_coeff * ar + noise.sample(&mut rng);
            k += 1;
        }
    }

    let trace = Trace::new(events, duration);
    let log = GroundTruthActivityLog { stays, rooms, numeric };
    Ok((trace, schema, log))
}
