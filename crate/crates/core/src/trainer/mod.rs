//! Optimization: warmup schedule, label-smoothed loss, Adam, token-bucketed
//! batching, checkpoint averaging, and the generic → fine-tune regime.

mod batching;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub use batching::{make_batches, Batch, EncodedPair};
pub use optim::{average_checkpoints, clip_global_norm, Adam};
pub use run::{load_optimizer, EpochRecord, LogRow, Phase, PhaseResult, TrainOutcome, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub batch_tokens: usize,
    pub max_len: usize,
    /// Generic-phase epochs.
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub checkpoint_keep: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Multiplier on the schedule; 1 gives the plain schedule.
    pub lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            adam_epsilon: 1e-9,
            warmup_steps: 8000,
            label_smoothing: 0.1,
            batch_tokens: 25_000,
            max_len: 256,
            epochs: 30,
            finetune_epochs: 10,
            checkpoint_keep: 8,
            seed: 1,
            clip_norm: Some(5.0),
            lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) || self.adam_epsilon <= 0.0 {
            return Err(Error::Config(
                "Adam betas must lie in (0,1) and epsilon be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.warmup_steps == 0
            || self.batch_tokens == 0
            || self.max_len == 0
            || self.checkpoint_keep == 0
        {
            return Err(Error::Config(
                "warmup_steps, batch_tokens, max_len and checkpoint_keep must be positive".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) || self.lr_scale <= 0.0 {
            return Err(Error::Config(
                "clip_norm and lr_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// d_model^-0.5 · min(step^-0.5, step · warmup^-1.5).
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Contract(
            "learning-rate schedule starts at step 1".into(),
        ));
    }
    let (s, w) = (step as f64, warmup as f64);
    // s·w^-1.5 written as (s/w)·w^-0.5 so both branches agree bit-for-bit at s = w.
    let warm = (s / w) * w.powf(-0.5);
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(warm))
}

/// Mean over non-pad targets of the cross-entropy against a smoothed
/// distribution: 1−ε on the gold id, ε/(V−1) on each other id.
/// `logits` is `[..., V]` with one row per entry of `targets`.
pub fn label_smoothed_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    targets: &[usize],
    epsilon: f64,
    pad_id: usize,
) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    let v = *shape
        .last()
        .ok_or_else(|| Error::Contract("loss over rank-0 logits".into()))?;
    if logits.len() != targets.len() * v || v < 2 {
        return Err(Error::dim(
            "label_smoothed_loss",
            &shape,
            &[targets.len(), v],
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Contract(format!(
            "target id {bad} outside vocabulary of {v}"
        )));
    }
    let real = targets.iter().filter(|&&t| t != pad_id).count();
    if real == 0 {
        return Err(Error::Contract("loss over an all-padding batch".into()));
    }
    let (on, off) = (T::of(1.0 - epsilon), T::of(epsilon / (v - 1) as f64));
    let mut q = vec![T::zero(); logits.len()];
    for (row, &t) in q.chunks_mut(v).zip(targets) {
        if t != pad_id {
            row.fill(off);
            row[t] = on;
        }
    }
    let q = logits.tape().constant(Tensor::new(shape, q)?);
    Ok(logits
        .log_softmax()?
        .mul(q)?
        .sum()
        .scale(-1.0 / real as f64))
}
