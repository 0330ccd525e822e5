use crate::error::{Error, Result};
use crate::linalg::Activation;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    Vanilla,
    PanguPi,
}

/// Feed-forward form used by vanilla blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VanillaFfn {
    /// `σ(X·W1)·W2`
    Mlp,
    /// `(swish(X·Wg) ⊙ X·Wu)·Wd`
    SwiGlu,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Number of series-activation branches (pangu_pi only).
    pub siaf_n: usize,
    /// Number of augmented shortcuts per attention sublayer (pangu_pi only).
    pub shortcut_t: usize,
    /// Bottleneck reduction ratio; 1 selects a single dense d×d projection.
    pub reduction_r: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_ff: usize,
    pub base_activation: Activation,
    /// Per-branch activations; empty means every branch uses `base_activation`.
    pub siaf_activations: Vec<Activation>,
    pub block_style: BlockStyle,
    pub vanilla_ffn: VanillaFfn,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            siaf_n: 2,
            shortcut_t: 1,
            reduction_r: 32,
            vocab_size: crate::train::BYTE_VOCAB,
            max_seq_len: 256,
            d_ff: 512,
            base_activation: Activation::Gelu,
            siaf_activations: Vec::new(),
            block_style: BlockStyle::PanguPi,
            vanilla_ffn: VanillaFfn::Mlp,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.d_model / self.reduction_r
    }

    /// Branch count actually instantiated (1 for vanilla blocks).
    pub fn effective_siaf_n(&self) -> usize {
        match self.block_style {
            BlockStyle::Vanilla => 1,
            BlockStyle::PanguPi => self.siaf_n,
        }
    }

    /// Shortcut count actually instantiated (0 for vanilla blocks).
    pub fn effective_shortcut_t(&self) -> usize {
        match self.block_style {
            BlockStyle::Vanilla => 0,
            BlockStyle::PanguPi => self.shortcut_t,
        }
    }

    pub fn branch_activation(&self, i: usize) -> Activation {
        self.siaf_activations.get(i).copied().unwrap_or(self.base_activation)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads, vocab_size, max_seq_len and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.reduction_r == 0 || self.d_model % self.reduction_r != 0 {
            return fail(format!("reduction_r {} must divide d_model {}", self.reduction_r, self.d_model));
        }
        if self.siaf_n == 0 {
            return fail("siaf_n must be at least 1".into());
        }
        if !self.siaf_activations.is_empty() && self.siaf_activations.len() != self.siaf_n {
            return fail(format!(
                "siaf_activations lists {} entries for {} branches",
                self.siaf_activations.len(),
                self.siaf_n
            ));
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) || !(self.init_std > 0.0) {
            return fail("rope_base > 1, norm_eps > 0 and init_std > 0 are required".into());
        }
        Ok(())
    }

    /// Shape of the released 1B model: 2048 wide, 16 heads, 12 layers.
    pub fn released_1b() -> Self {
        Self {
            d_model: 2048,
            n_heads: 16,
            n_layers: 12,
            vocab_size: 100_000,
            max_seq_len: 2048,
            d_ff: 4 * 2048,
            ..Self::default()
        }
    }

    /// Shape of the released 7B model: 4096 wide, 32 heads, 29 layers.
    pub fn released_7b() -> Self {
        Self {
            d_model: 4096,
            n_heads: 32,
            n_layers: 29,
            vocab_size: 100_000,
            max_seq_len: 4096,
            d_ff: 4 * 4096,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::released_1b().validate().unwrap();
        ModelConfig::released_7b().validate().unwrap();
        let d = ModelConfig::default();
        assert_eq!((d.siaf_n, d.reduction_r, d.shortcut_t), (2, 32, 1));
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let bad_heads = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        let bad_r = ModelConfig { reduction_r: 3, ..ModelConfig::default() };
        assert!(bad_r.validate().is_err());
        let odd_head = ModelConfig { d_model: 12, n_heads: 4, reduction_r: 4, ..ModelConfig::default() };
        assert!(odd_head.validate().is_err());
        let no_branch = ModelConfig { siaf_n: 0, ..ModelConfig::default() };
        assert!(no_branch.validate().is_err());
    }

    #[test]
    fn strict_schema() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"d_model": 64, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"d_model": 64, "block_style": "vanilla"}"#).unwrap();
        assert_eq!(ok.block_style, BlockStyle::Vanilla);
    }
}
