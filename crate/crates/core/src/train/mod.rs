//! Byte-level language-model training: data, AdamW, schedule and loop.

pub mod data;
pub mod optimizer;
pub mod schedule;
mod trainer;

pub use data::{synthetic_text, Batch, Corpus, BOS, BYTE_VOCAB, EOS, PAD};
pub use optimizer::{adamw_step, adamw_update, clip_global_norm, decays, AdamState};
pub use schedule::cosine_lr;
pub use trainer::{loss_and_gradients, periodic_checkpoint_dir, train, MetricRow, TrainOutcome, CHECKPOINT_DIR, METRICS_FILE};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Also write `checkpoint_<step>` every this many steps; 0 writes only
    /// the final checkpoint.
    pub checkpoint_every: usize,
    /// Fraction of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 100,
            total_steps: 5000,
            min_lr_ratio: 0.1,
            batch_size: 1,
            seq_len: 256,
            seed: 0,
            precision: Precision::F32,
            grad_clip: 1.0,
            checkpoint_every: 0,
            val_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m));
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return fail("0 < beta1 < beta2 < 1 is required");
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps must not exceed total_steps");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return fail("learning_rate and adam_eps must be positive, weight_decay nonnegative");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("min_lr_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return fail("batch_size and seq_len must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.grad_clip < 0.0 {
            return fail("val_fraction must lie in [0, 1) and grad_clip must be nonnegative");
        }
        Ok(())
    }
}
