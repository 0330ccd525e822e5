//! Parameter containers. The same structure holds owned arrays for storage
//! and tape handles during differentiation, so it is generic over the
//! element type `M`.

use crate::model::config::{BlockStyle, ModelConfig, VanillaFfn};
use crate::rng::{gaussian, seeded, SeededRng};
use crate::Scalar;
use ndarray::Array2;

#[derive(Clone, Debug, PartialEq)]
pub struct SiafBranchWeights<M> {
    /// d×d_ff first projection of this branch.
    pub w1: M,
    /// 1×1 scale `a_i`.
    pub scale: M,
    /// 1×1 bias `b_i`.
    pub bias: M,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights<M> {
    Mlp { w1: M, w2: M },
    SwiGlu { w_gate: M, w_up: M, w_down: M },
    Siaf { branches: Vec<SiafBranchWeights<M>>, w2: M },
}

/// One augmented shortcut.
#[derive(Clone, Debug, PartialEq)]
pub enum ShortcutWeights<M> {
    /// `σ(Z·Θ)` with Θ ∈ R^{d×d}.
    Dense { theta: M },
    /// `σ(Z·W_down)·W_up` with W_down ∈ R^{d×d/r}.
    Bottleneck { w_down: M, w_up: M },
}

/// Multi-head attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<M> {
    /// Per-head d×(d/H) projections.
    pub wq: Vec<M>,
    pub wk: Vec<M>,
    pub wv: Vec<M>,
    /// d×d output projection.
    pub wo: M,
}

impl<M> AttentionWeights<M> {
    pub fn n_heads(&self) -> usize {
        self.wv.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<M> {
    pub attn_norm: M,
    pub attn: AttentionWeights<M>,
    pub shortcuts: Vec<ShortcutWeights<M>>,
    pub ffn_norm: M,
    pub ffn: FfnWeights<M>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<M> {
    pub tok_emb: M,
    pub layers: Vec<LayerWeights<M>>,
    pub final_norm: M,
    pub lm_head: M,
}

impl<M> Weights<M> {
    /// Visits every tensor in canonical order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a M)) {
        f("tok_emb".into(), &self.tok_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            f(format!("layers.{l}.attn_norm"), &layer.attn_norm);
            let attn = &layer.attn;
            for (tag, heads) in [("wq", &attn.wq), ("wk", &attn.wk), ("wv", &attn.wv)] {
                for (h, w) in heads.iter().enumerate() {
                    f(format!("layers.{l}.attn.{tag}.{h}"), w);
                }
            }
            f(format!("layers.{l}.attn.wo"), &attn.wo);
            for (i, sc) in layer.shortcuts.iter().enumerate() {
                match sc {
                    ShortcutWeights::Dense { theta } => f(format!("layers.{l}.shortcut.{i}.theta"), theta),
                    ShortcutWeights::Bottleneck { w_down, w_up } => {
                        f(format!("layers.{l}.shortcut.{i}.w_down"), w_down);
                        f(format!("layers.{l}.shortcut.{i}.w_up"), w_up);
                    }
                }
            }
            f(format!("layers.{l}.ffn_norm"), &layer.ffn_norm);
            match &layer.ffn {
                FfnWeights::Mlp { w1, w2 } => {
                    f(format!("layers.{l}.ffn.w1"), w1);
                    f(format!("layers.{l}.ffn.w2"), w2);
                }
                FfnWeights::SwiGlu { w_gate, w_up, w_down } => {
                    f(format!("layers.{l}.ffn.w_gate"), w_gate);
                    f(format!("layers.{l}.ffn.w_up"), w_up);
                    f(format!("layers.{l}.ffn.w_down"), w_down);
                }
                FfnWeights::Siaf { branches, w2 } => {
                    for (i, b) in branches.iter().enumerate() {
                        f(format!("layers.{l}.ffn.branch.{i}.w1"), &b.w1);
                        f(format!("layers.{l}.ffn.branch.{i}.scale"), &b.scale);
                        f(format!("layers.{l}.ffn.branch.{i}.bias"), &b.bias);
                    }
                    f(format!("layers.{l}.ffn.w2"), w2);
                }
            }
        }
        f("final_norm".into(), &self.final_norm);
        f("lm_head".into(), &self.lm_head);
    }

    /// Builds a structurally identical container by mapping every tensor.
    pub fn map<N>(&self, f: &mut impl FnMut(&str, &M) -> N) -> Weights<N> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name));
        let mut names = names.into_iter();
        let mut g = |m: &M| {
            let name = names.next().expect("visit order matches structure");
            f(&name, m)
        };
        let tok_emb = g(&self.tok_emb);
        let layers = self
            .layers
            .iter()
            .map(|layer| {
                let attn_norm = g(&layer.attn_norm);
                let wq = layer.attn.wq.iter().map(&mut g).collect();
                let wk = layer.attn.wk.iter().map(&mut g).collect();
                let wv = layer.attn.wv.iter().map(&mut g).collect();
                let wo = g(&layer.attn.wo);
                let shortcuts = layer
                    .shortcuts
                    .iter()
                    .map(|sc| match sc {
                        ShortcutWeights::Dense { theta } => ShortcutWeights::Dense { theta: g(theta) },
                        ShortcutWeights::Bottleneck { w_down, w_up } => ShortcutWeights::Bottleneck {
                            w_down: g(w_down),
                            w_up: g(w_up),
                        },
                    })
                    .collect();
                let ffn_norm = g(&layer.ffn_norm);
                let ffn = match &layer.ffn {
                    FfnWeights::Mlp { w1, w2 } => FfnWeights::Mlp { w1: g(w1), w2: g(w2) },
                    FfnWeights::SwiGlu { w_gate, w_up, w_down } => FfnWeights::SwiGlu {
                        w_gate: g(w_gate),
                        w_up: g(w_up),
                        w_down: g(w_down),
                    },
                    FfnWeights::Siaf { branches, w2 } => {
                        let branches = branches
                            .iter()
                            .map(|b| SiafBranchWeights {
                                w1: g(&b.w1),
                                scale: g(&b.scale),
                                bias: g(&b.bias),
                            })
                            .collect();
                        FfnWeights::Siaf { branches, w2: g(w2) }
                    }
                };
                LayerWeights {
                    attn_norm,
                    attn: AttentionWeights { wq, wk, wv, wo },
                    shortcuts,
                    ffn_norm,
                    ffn,
                }
            })
            .collect();
        let final_norm = g(&self.final_norm);
        let lm_head = g(&self.lm_head);
        Weights {
            tok_emb,
            layers,
            final_norm,
            lm_head,
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name));
        out
    }

    pub fn tensors(&self) -> Vec<&M> {
        let mut out = Vec::new();
        self.visit(&mut |_, m| out.push(m));
        out
    }
}

impl Weights<(usize, usize)> {
    /// The tensor structure implied by `cfg`, holding shapes only.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let k = cfg.bottleneck_dim();
        let f = cfg.d_ff;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: (1, d),
                attn: AttentionWeights {
                    wq: vec![(d, dh); cfg.n_heads],
                    wk: vec![(d, dh); cfg.n_heads],
                    wv: vec![(d, dh); cfg.n_heads],
                    wo: (d, d),
                },
                shortcuts: (0..cfg.effective_shortcut_t())
                    .map(|_| {
                        if cfg.reduction_r == 1 {
                            ShortcutWeights::Dense { theta: (d, d) }
                        } else {
                            ShortcutWeights::Bottleneck {
                                w_down: (d, k),
                                w_up: (k, d),
                            }
                        }
                    })
                    .collect(),
                ffn_norm: (1, d),
                ffn: match (cfg.block_style, cfg.vanilla_ffn) {
                    (BlockStyle::Vanilla, VanillaFfn::Mlp) => FfnWeights::Mlp { w1: (d, f), w2: (f, d) },
                    (BlockStyle::Vanilla, VanillaFfn::SwiGlu) => FfnWeights::SwiGlu {
                        w_gate: (d, f),
                        w_up: (d, f),
                        w_down: (f, d),
                    },
                    (BlockStyle::PanguPi, _) => FfnWeights::Siaf {
                        branches: (0..cfg.siaf_n)
                            .map(|_| SiafBranchWeights {
                                w1: (d, f),
                                scale: (1, 1),
                                bias: (1, 1),
                            })
                            .collect(),
                        w2: (f, d),
                    },
                },
            })
            .collect();
        Weights {
            tok_emb: (cfg.vocab_size, d),
            layers,
            final_norm: (1, d),
            lm_head: (d, cfg.vocab_size),
        }
    }
}

/// How a tensor is initialized, decided by its name.
enum InitKind {
    Ones,
    Zeros,
    Normal,
    /// Projection writing into the residual stream.
    Residual,
}

fn init_kind(name: &str) -> InitKind {
    let last = name.rsplit('.').next().unwrap_or(name);
    let in_shortcut = name.contains(".shortcut.");
    match last {
        "attn_norm" | "ffn_norm" | "final_norm" | "scale" => InitKind::Ones,
        "bias" => InitKind::Zeros,
        "wo" | "w2" | "w_down" if !in_shortcut => InitKind::Residual,
        "w_up" | "theta" if in_shortcut => InitKind::Residual,
        _ => InitKind::Normal,
    }
}

impl<T: Scalar> Weights<Array2<T>> {
    /// Gaussian initialization; projections feeding the residual stream are
    /// scaled down by `1/√(2L)`. Gains and series-activation scales start at
    /// one, biases at zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng: SeededRng = seeded(seed);
        let std = cfg.init_std;
        let resid_std = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        Weights::shapes(cfg).map(&mut |name, &(r, c)| match init_kind(name) {
            InitKind::Ones => Array2::ones((r, c)),
            InitKind::Zeros => Array2::zeros((r, c)),
            InitKind::Normal => gaussian(&mut rng, r, c, std),
            InitKind::Residual => gaussian(&mut rng, r, c, resid_std),
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Weights::shapes(cfg).map(&mut |_, &shape| Array2::zeros(shape))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |_, m| Array2::zeros(m.dim()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<Array2<U>> {
        self.map(&mut |_, m| m.mapv(|x| U::of(x.as_f64())))
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> crate::Result<()> {
        let mut mine = Vec::new();
        self.visit(&mut |n, m| mine.push((n, m.dim())));
        if mine != Self::shape_template(cfg) {
            return Err(crate::Error::shape(
                "weights",
                "tensor directory does not match the model configuration",
            ));
        }
        Ok(())
    }

    /// Names and shapes for `cfg` in canonical order.
    pub fn shape_template(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        Weights::shapes(cfg).visit(&mut |n, &s| out.push((n, s)));
        out
    }

    /// Mutable access to every tensor in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out: Vec<&mut Array2<T>> = Vec::new();
        let Weights {
            tok_emb,
            layers,
            final_norm,
            lm_head,
        } = self;
        out.push(tok_emb);
        for layer in layers.iter_mut() {
            out.push(&mut layer.attn_norm);
            let a = &mut layer.attn;
            out.extend(a.wq.iter_mut());
            out.extend(a.wk.iter_mut());
            out.extend(a.wv.iter_mut());
            out.push(&mut a.wo);
            for sc in layer.shortcuts.iter_mut() {
                match sc {
                    ShortcutWeights::Dense { theta } => out.push(theta),
                    ShortcutWeights::Bottleneck { w_down, w_up } => {
                        out.push(w_down);
                        out.push(w_up);
                    }
                }
            }
            out.push(&mut layer.ffn_norm);
            match &mut layer.ffn {
                FfnWeights::Mlp { w1, w2 } => {
                    out.push(w1);
                    out.push(w2);
                }
                FfnWeights::SwiGlu { w_gate, w_up, w_down } => {
                    out.push(w_gate);
                    out.push(w_up);
                    out.push(w_down);
                }
                FfnWeights::Siaf { branches, w2 } => {
                    for b in branches.iter_mut() {
                        out.push(&mut b.w1);
                        out.push(&mut b.scale);
                        out.push(&mut b.bias);
                    }
                    out.push(w2);
                }
            }
        }
        out.push(final_norm);
        out.push(lm_head);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_matches_initialized_tensors() {
        for style in [BlockStyle::Vanilla, BlockStyle::PanguPi] {
            let cfg = ModelConfig {
                d_model: 32,
                n_heads: 4,
                reduction_r: 4,
                block_style: style,
                ..ModelConfig::default()
            };
            let w = Weights::<Array2<f64>>::init(&cfg, 1);
            w.check_shapes(&cfg).unwrap();
            assert_eq!(w.names().len(), w.tensors().len());
        }
    }

    #[test]
    fn mutable_order_matches_visit_order() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            reduction_r: 4,
            ..ModelConfig::default()
        };
        let mut w = Weights::<Array2<f64>>::init(&cfg, 3);
        let dims: Vec<_> = w.tensors().iter().map(|t| t.dim()).collect();
        for (i, t) in w.tensors_mut().into_iter().enumerate() {
            assert_eq!(t.dim(), dims[i]);
            t.fill(i as f64);
        }
        for (i, t) in w.tensors().iter().enumerate() {
            assert!(t.iter().all(|&x| x == i as f64));
        }
    }

    #[test]
    fn series_scales_start_at_one_and_biases_at_zero() {
        let cfg = ModelConfig::default();
        let w = Weights::<Array2<f32>>::init(&cfg, 0);
        match &w.layers[0].ffn {
            FfnWeights::Siaf { branches, .. } => {
                assert_eq!(branches.len(), 2);
                assert_eq!(branches[0].scale[[0, 0]], 1.0);
                assert_eq!(branches[1].bias[[0, 0]], 0.0);
            }
            _ => panic!("pangu_pi uses the series-activation FFN"),
        }
    }
}
