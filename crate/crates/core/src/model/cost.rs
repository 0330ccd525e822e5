//! Analytic multiply-add and parameter accounting.

use crate::model::config::{BlockStyle, ModelConfig, VanillaFfn};
use serde::Serialize;

/// Multiply-add counts for one forward pass over `tokens` positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub tokens: u64,
    /// Q, K, V and output projections, all layers.
    pub attention_projections: u64,
    /// `QKᵀ` and `A·V`, all layers.
    pub attention_mixing: u64,
    /// All augmented shortcuts, all layers.
    pub shortcuts: u64,
    /// One augmented shortcut in one layer.
    pub per_shortcut: u64,
    /// First FFN projections (one per series-activation branch), all layers.
    pub ffn_first: u64,
    pub ffn_second: u64,
    pub lm_head: u64,
    pub total: u64,
}

/// Multiply-adds of one shortcut on `n` tokens: `N·d²` for the dense form,
/// `2·N·d²/r` for the bottleneck.
pub fn shortcut_flops(cfg: &ModelConfig, n: u64) -> u64 {
    let d = cfg.d_model as u64;
    if cfg.reduction_r == 1 {
        n * d * d
    } else {
        2 * n * d * (d / cfg.reduction_r as u64)
    }
}

pub fn count_flops(cfg: &ModelConfig, tokens: usize) -> FlopCounts {
    let n = tokens as u64;
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let l = cfg.n_layers as u64;
    let per_shortcut = shortcut_flops(cfg, n);
    let (first, second) = match (cfg.block_style, cfg.vanilla_ffn) {
        (BlockStyle::Vanilla, VanillaFfn::Mlp) => (n * d * f, n * f * d),
        (BlockStyle::Vanilla, VanillaFfn::SwiGlu) => (2 * n * d * f, n * f * d),
        (BlockStyle::PanguPi, _) => (cfg.siaf_n as u64 * n * d * f, n * f * d),
    };
    let mut c = FlopCounts {
        tokens: n,
        attention_projections: l * 4 * n * d * d,
        attention_mixing: l * 2 * n * n * d,
        shortcuts: l * cfg.effective_shortcut_t() as u64 * per_shortcut,
        per_shortcut,
        ffn_first: l * first,
        ffn_second: l * second,
        lm_head: n * d * cfg.vocab_size as u64,
        total: 0,
    };
    c.total = c.attention_projections + c.attention_mixing + c.shortcuts + c.ffn_first + c.ffn_second + c.lm_head;
    c
}

/// Exact parameter totals by component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embedding: u64,
    pub attention: u64,
    pub shortcuts: u64,
    pub ffn: u64,
    pub norms: u64,
    pub lm_head: u64,
    pub total: u64,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let l = cfg.n_layers as u64;
    let v = cfg.vocab_size as u64;
    let per_shortcut = if cfg.reduction_r == 1 {
        d * d
    } else {
        2 * d * (d / cfg.reduction_r as u64)
    };
    let ffn = match (cfg.block_style, cfg.vanilla_ffn) {
        (BlockStyle::Vanilla, VanillaFfn::Mlp) => 2 * d * f,
        (BlockStyle::Vanilla, VanillaFfn::SwiGlu) => 3 * d * f,
        (BlockStyle::PanguPi, _) => cfg.siaf_n as u64 * (d * f + 2) + f * d,
    };
    let mut p = ParamCount {
        embedding: v * d,
        attention: l * 4 * d * d,
        shortcuts: l * cfg.effective_shortcut_t() as u64 * per_shortcut,
        ffn: l * ffn,
        norms: (2 * l + 1) * d,
        lm_head: d * v,
        total: 0,
    };
    p.total = p.embedding + p.attention + p.shortcuts + p.ffn + p.norms + p.lm_head;
    p
}
