//! End-to-end training loops for the two pretext tasks.
//!
//! Each step samples one batch from one volume (never across volumes),
//! runs forward + loss on a fresh tape, applies one Adam update, and
//! reports a `step,loss,metric` row. Everything is seeded: model
//! initialization from `seed`, sampling from a salted stream of the same
//! seed, so identical configs reproduce identical checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::losses::{margin_ranking_loss, mean_displacement, rotation_nll};
use crate::models::{forward_rot, forward_sort, RotNet, SortNet};
use crate::sampling::{sample_rot_batch, sample_sort_batch, SamplerConfig};
use crate::tape::Tape;
use crate::volume::Volume3D;

/// Decorrelates the sampling stream from model initialization.
const SAMPLER_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub lr: f32,
    pub steps: usize,
    /// Margin `m` of the sorting loss.
    pub margin: f32,
    pub seed: u64,
    /// Sample rotation training slices from all three axes instead of the
    /// configured one.
    pub train_all_axes: bool,
}

impl TrainConfig {
    fn validate(&self, volumes: &[Volume3D]) -> Result<()> {
        if volumes.is_empty() {
            return Err(Error::InvalidArg("no training volumes".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArg("steps must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArg("learning rate must be > 0".into()));
        }
        self.sampler.validate()
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy)]
pub struct StepRow {
    pub step: usize,
    pub loss: f32,
    /// Mean displacement for the sorting task, batch accuracy for rotation.
    pub metric: f32,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax logit hits the label.
pub fn classification_accuracy(logits: &[f32], num_classes: usize, labels: &[usize]) -> f32 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(row, &label)| argmax(&logits[row * num_classes..(row + 1) * num_classes]) == label)
        .count();
    correct as f32 / labels.len() as f32
}

/// Trains a fresh [`SortNet`] with the margin ranking loss.
pub fn train_sort(
    volumes: &[Volume3D],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRow),
) -> Result<SortNet> {
    cfg.validate(volumes)?;
    let mut net = SortNet::new(cfg.seed);
    let mut state = {
        let params = net.named_params();
        let refs: Vec<&crate::tensor::Tensor> = params.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs, AdamConfig::with_lr(cfg.lr))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    for step in 0..cfg.steps {
        let vol = &volumes[rng.random_range(0..volumes.len())];
        let batch = sample_sort_batch(vol, &cfg.sampler, &mut rng)?;
        let mut tape = Tape::new();
        let fwd = forward_sort(&mut tape, &net, &batch)?;
        let loss = margin_ranking_loss(&mut tape, fwd.output, &batch.ranks, cfg.margin)?;
        let loss_value = tape.scalar(loss)?;
        let metric = mean_displacement(tape.value(fwd.output), &batch.ranks)?;
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = fwd
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).to_vec())
            .collect();
        let mut params = net.params_mut();
        adam_step(&mut params, &grads, &mut state)?;
        on_step(&StepRow {
            step,
            loss: loss_value,
            metric,
        });
    }
    Ok(net)
}

/// Mean displacement of a trained net over seeded held-out batches.
pub fn eval_sort(
    net: &SortNet,
    volumes: &[Volume3D],
    sampler: &SamplerConfig,
    batches: usize,
    seed: u64,
) -> Result<f32> {
    if volumes.is_empty() || batches == 0 {
        return Err(Error::InvalidArg("nothing to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0f64;
    for b in 0..batches {
        let vol = &volumes[b % volumes.len()];
        let batch = sample_sort_batch(vol, sampler, &mut rng)?;
        let mut tape = Tape::new();
        let fwd = forward_sort(&mut tape, net, &batch)?;
        acc += mean_displacement(tape.value(fwd.output), &batch.ranks)? as f64;
    }
    Ok((acc / batches as f64) as f32)
}

/// Trains a fresh [`RotNet`] with the rotation classification loss.
pub fn train_rot(
    volumes: &[Volume3D],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRow),
) -> Result<RotNet> {
    cfg.validate(volumes)?;
    let mut net = RotNet::new(cfg.seed, cfg.sampler.angles_deg.clone());
    let mut state = {
        let params = net.named_params();
        let refs: Vec<&crate::tensor::Tensor> = params.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs, AdamConfig::with_lr(cfg.lr))
    };
    let k = net.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLER_SALT);
    for step in 0..cfg.steps {
        let vol = &volumes[rng.random_range(0..volumes.len())];
        let mut sampler = cfg.sampler.clone();
        if cfg.train_all_axes {
            sampler.axis = rng.random_range(0..3);
        }
        let batch = sample_rot_batch(vol, &sampler, &mut rng)?;
        let mut tape = Tape::new();
        let fwd = forward_rot(&mut tape, &net, &batch)?;
        let loss = rotation_nll(&mut tape, fwd.output, &batch.labels)?;
        let loss_value = tape.scalar(loss)?;
        let metric = classification_accuracy(tape.value(fwd.output), k, &batch.labels);
        tape.backward(loss)?;
        let grads: Vec<Vec<f32>> = fwd
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).to_vec())
            .collect();
        let mut params = net.params_mut();
        adam_step(&mut params, &grads, &mut state)?;
        on_step(&StepRow {
            step,
            loss: loss_value,
            metric,
        });
    }
    Ok(net)
}

/// Pair-classification accuracy over seeded held-out batches.
pub fn eval_rot(
    net: &RotNet,
    volumes: &[Volume3D],
    sampler: &SamplerConfig,
    batches: usize,
    seed: u64,
    all_axes: bool,
) -> Result<f32> {
    if volumes.is_empty() || batches == 0 {
        return Err(Error::InvalidArg("nothing to evaluate".into()));
    }
    let k = net.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0.0f64;
    let mut total = 0usize;
    for b in 0..batches {
        let vol = &volumes[b % volumes.len()];
        let mut cfg = sampler.clone();
        if all_axes {
            cfg.axis = rng.random_range(0..3);
        }
        let batch = sample_rot_batch(vol, &cfg, &mut rng)?;
        let mut tape = Tape::new();
        let fwd = forward_rot(&mut tape, net, &batch)?;
        let acc = classification_accuracy(tape.value(fwd.output), k, &batch.labels);
        correct += acc as f64 * batch.labels.len() as f64;
        total += batch.labels.len();
    }
    Ok((correct / total as f64) as f32)
}
