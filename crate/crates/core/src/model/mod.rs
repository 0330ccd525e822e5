//! Vanilla and series-activation/augmented-shortcut decoder models.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod layers;
pub mod modules;
pub mod weights;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use config::{BlockStyle, ModelConfig, VanillaFfn};
pub use cost::{count_flops, param_count, shortcut_flops, FlopCounts, ParamCount};
pub use modules::{
    aug_msa_forward, attention_matrix, block_forward, bottleneck_shortcut, dense_shortcut, mlp_forward, msa_forward,
    msa_with_attention, rms_normalize, rope_apply, shortcut_forward, siaf, siaf_mlp_forward, MsaOutput, SiafBranch,
};
pub use weights::{AttentionWeights, FfnWeights, LayerWeights, ShortcutWeights, SiafBranchWeights, Weights};

use crate::error::{Error, Result};
use crate::ops::{Backend, Eager};
use crate::Scalar;
use ndarray::Array2;

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub weights: Weights<Array2<T>>,
}

/// Logits and, when requested, the output of every block.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Array2<T>,
    pub hidden: Option<Vec<Array2<T>>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, seed);
        Ok(Model { config, weights })
    }

    pub fn from_parts(config: ModelConfig, weights: Weights<Array2<T>>) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Model { config, weights })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        Self::from_parts(ck.config, ck.weights)
    }

    pub fn check_tokens(&self, tokens: &[usize], seq_len: usize) -> Result<()> {
        if seq_len == 0 || tokens.is_empty() || tokens.len() % seq_len != 0 {
            return Err(Error::invalid(format!(
                "{} tokens do not split into sequences of length {seq_len}",
                tokens.len()
            )));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq_len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Causal forward pass over a single sequence.
    pub fn forward(&self, tokens: &[usize], capture: bool) -> Result<ForwardOutput<T>> {
        self.forward_batch(tokens, tokens.len(), capture)
    }

    /// Causal forward pass over back-to-back sequences of `seq_len` tokens.
    pub fn forward_batch(&self, tokens: &[usize], seq_len: usize, capture: bool) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens, seq_len)?;
        let (logits, hidden) = layers::forward(&Eager, &self.weights, &self.config, tokens, seq_len, capture);
        Ok(ForwardOutput {
            logits,
            hidden: capture.then_some(hidden),
        })
    }

    /// Mean next-token cross-entropy of `targets` under the logits of `tokens`.
    pub fn loss(&self, tokens: &[usize], targets: &[usize], seq_len: usize) -> Result<T> {
        if targets.len() != tokens.len() {
            return Err(Error::invalid("targets and tokens differ in length"));
        }
        self.check_tokens(targets, seq_len)?;
        let out = self.forward_batch(tokens, seq_len, false)?;
        Ok(Eager.cross_entropy(&out.logits, targets)[[0, 0]])
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }
}
