//! Sensor-wise masked reconstruction training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::forward::{backward, forward, Dropout};
use super::loss::focal_loss;
use super::params::{apply_mask_into, init_params, MaskedInput, Params};
use crate::encoding::SequenceWindow;
use crate::error::{Error, Result};
use crate::sensor::HomeSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-sensor masking probability.
    pub p_mask: f64,
    pub focal_gamma: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 30,
            batch_size: 64,
            p_mask: 0.15,
            focal_gamma: 2.0,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.p_mask > 0.0 && self.p_mask < 1.0) {
            return bad("p_mask must lie in (0, 1)");
        }
        if !(self.focal_gamma >= 0.0) {
            return bad("focal_gamma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Independent per-sensor Bernoulli mask, redrawn until non-empty.
pub fn sample_mask_set(n_sensors: usize, p_mask: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    loop {
        let mask: Vec<bool> = (0..n_sensors).map(|_| rng.random_bool(p_mask)).collect();
        if mask.iter().any(|m| *m) {
            return mask;
        }
    }
}

/// One masked training batch: model input, reconstruction targets and the
/// positions that carry loss.
pub struct Batch {
    pub input: MaskedInput,
    pub targets: Vec<f64>,
    pub size: usize,
}

pub fn build_batch(windows: &[SequenceWindow<'_>], schema: &HomeSchema, mask_value: f64, p_mask: f64, rng: &mut ChaCha8Rng) -> Batch {
    let n = windows.iter().map(|w| w.bits.len()).sum();
    let mut input = MaskedInput::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for w in windows {
        let mask = sample_mask_set(schema.len(), p_mask, rng);
        apply_mask_into(w.bits, schema, &mask, mask_value, &mut input);
        targets.extend(w.bits.iter().map(|&b| f64::from(b)));
    }
    Batch {
        input,
        targets,
        size: windows.len(),
    }
}

/// Focal loss and its gradient for one batch.
pub fn batch_loss(params: &Params, batch: &Batch, gamma: f64, dropout: Dropout<'_>) -> Result<(f64, Vec<f64>)> {
    let cache = forward(params, &batch.input.values, &batch.input.is_mask, batch.size, dropout)?;
    let (loss, dlogits) = focal_loss(&cache.logits, &batch.targets, &batch.input.is_mask, gamma)?;
    let grad = backward(params, &cache, &dlogits)?;
    Ok((loss, grad))
}

/// Trains from scratch. Returns the parameters (rounded to `f32` precision,
/// exactly as a checkpoint stores them) and the mean loss of every epoch.
pub fn train(windows: &[SequenceWindow<'_>], schema: &HomeSchema, config: &TrainConfig) -> Result<(Params, Vec<f64>)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let window_len = windows[0].len();
    let mut params = init_params(schema, window_len, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
    let mut state = AdamState::new(params.len());
    let adam = config.adam();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut chunk = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            chunk.clear();
            chunk.extend(idx.iter().map(|&i| windows[i]));
            let batch = build_batch(&chunk, schema, params.mask_value(), config.p_mask, &mut rng);
            let dropout = Dropout::Sample {
                rate: config.dropout_rate,
                rng: &mut rng,
            };
            let (loss, grad) = batch_loss(&params, &batch, config.focal_gamma, dropout)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            adam_step(&mut params, &grad, &mut state, &adam);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        curve.push(mean);
    }
    params.round_to_f32();
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{calibrate_stats, encode_stream};
    use crate::synth::{generate_synthetic_trace, SynthConfig};

    #[test]
    fn masks_are_never_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert!(sample_mask_set(3, 0.05, &mut rng).iter().any(|m| *m));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = TrainConfig {
            p_mask: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout_rate: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_decreases_and_runs_repeat() {
        let cfg = SynthConfig {
            duration_hours: 4.0,
            ..SynthConfig::default()
        };
        let (trace, schema, _) = generate_synthetic_trace(&cfg).unwrap();
        let stats = calibrate_stats(&trace, &schema).unwrap();
        let stream = encode_stream(&trace, &stats, &schema).unwrap();
        let windows: Vec<_> = stream.windows(5).collect();
        let tc = TrainConfig {
            epochs: 6,
            dropout_rate: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let (p1, c1) = train(&windows, &schema, &tc).unwrap();
        let (p2, c2) = train(&windows, &schema, &tc).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
        assert!(c1.last().unwrap() < c1.first().unwrap(), "{c1:?}");
    }
}
