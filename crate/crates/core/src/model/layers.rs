//! Transformer building blocks, written once against [`Backend`] so the
//! same code runs eagerly and on the autodiff tape.

use crate::linalg::Activation;
use crate::model::config::{BlockStyle, ModelConfig};
use crate::model::weights::{AttentionWeights, FfnWeights, LayerWeights, ShortcutWeights, Weights};
use crate::ops::Backend;
use crate::Scalar;

/// How attention treats the stacked rows of its input.
#[derive(Clone, Copy, Debug)]
pub struct AttnOpts<'a> {
    pub causal: bool,
    /// Rows per sequence; the input holds `rows / seq_len` sequences.
    pub seq_len: usize,
    /// Per-sequence positions and base frequency for rotary embeddings.
    pub rope: Option<(&'a [usize], f64)>,
}

impl AttnOpts<'_> {
    /// Single sequence, bidirectional, no positional rotation.
    pub fn plain(n: usize) -> Self {
        AttnOpts {
            causal: false,
            seq_len: n,
            rope: None,
        }
    }
}

fn sum_all<T: Scalar, B: Backend<T>>(b: &B, mut parts: Vec<B::M>) -> B::M {
    let mut acc = parts.remove(0);
    for p in &parts {
        acc = b.add(&acc, p);
    }
    acc
}

fn join<T: Scalar, B: Backend<T>>(parts: Vec<B::M>, f: impl FnOnce(&[B::M]) -> B::M) -> B::M {
    if parts.len() == 1 {
        parts.into_iter().next().expect("one part")
    } else {
        f(&parts)
    }
}

/// Multi-head attention. Returns the projected output and, when requested,
/// every attention matrix in (head, sequence) order.
pub fn msa<T: Scalar, B: Backend<T>>(
    b: &B,
    x: &B::M,
    w: &AttentionWeights<B::M>,
    opts: &AttnOpts<'_>,
    keep_attention: bool,
) -> (B::M, Vec<B::M>) {
    let rows = b.dims(x).0;
    let n = opts.seq_len;
    let n_seq = rows / n;
    let positions: Option<(Vec<usize>, T)> = opts
        .rope
        .map(|(p, base)| (p.iter().copied().cycle().take(rows).collect(), T::of(base)));
    let mut heads = Vec::with_capacity(w.n_heads());
    let mut attention = Vec::new();
    for h in 0..w.n_heads() {
        let mut q = b.matmul(x, &w.wq[h]);
        let mut k = b.matmul(x, &w.wk[h]);
        let v = b.matmul(x, &w.wv[h]);
        if let Some((pos, base)) = &positions {
            q = b.rope(&q, pos, *base);
            k = b.rope(&k, pos, *base);
        }
        let scale = T::of(1.0 / (b.dims(&q).1 as f64).sqrt());
        let mut outs = Vec::with_capacity(n_seq);
        for s in 0..n_seq {
            let part = |m: &B::M| if n_seq == 1 { m.clone() } else { b.slice_rows(m, s * n, n) };
            let logits = b.scale(&b.matmul_nt(&part(&q), &part(&k)), scale);
            let a = b.softmax_rows(&logits, opts.causal);
            outs.push(b.matmul(&a, &part(&v)));
            if keep_attention {
                attention.push(a);
            }
        }
        heads.push(join::<T, B>(outs, |p| b.concat_rows(p)));
    }
    let cat = join::<T, B>(heads, |p| b.concat_cols(p));
    (b.matmul(&cat, &w.wo), attention)
}

/// `Concat_h(A_h·X·W^v_h)·W^o` with externally supplied attention matrices.
pub fn msa_given_attention<T: Scalar, B: Backend<T>>(
    b: &B,
    x: &B::M,
    attention: &[B::M],
    w: &AttentionWeights<B::M>,
) -> B::M {
    let heads = attention
        .iter()
        .zip(&w.wv)
        .map(|(a, wv)| b.matmul(a, &b.matmul(x, wv)))
        .collect();
    let cat = join::<T, B>(heads, |p| b.concat_cols(p));
    b.matmul(&cat, &w.wo)
}

pub fn shortcut<T: Scalar, B: Backend<T>>(b: &B, x: &B::M, sc: &ShortcutWeights<B::M>, act: Activation) -> B::M {
    match sc {
        ShortcutWeights::Dense { theta } => b.activation(&b.matmul(x, theta), act),
        ShortcutWeights::Bottleneck { w_down, w_up } => b.matmul(&b.activation(&b.matmul(x, w_down), act), w_up),
    }
}

/// Feed-forward sublayer. `acts[i]` is the activation of branch `i`; the
/// plain MLP uses `acts[0]` and SwiGLU always gates with swish.
pub fn ffn<T: Scalar, B: Backend<T>>(b: &B, x: &B::M, f: &FfnWeights<B::M>, acts: &[Activation]) -> B::M {
    match f {
        FfnWeights::Mlp { w1, w2 } => b.matmul(&b.activation(&b.matmul(x, w1), acts[0]), w2),
        FfnWeights::SwiGlu { w_gate, w_up, w_down } => {
            let gate = b.activation(&b.matmul(x, w_gate), Activation::Swish);
            b.matmul(&b.mul(&gate, &b.matmul(x, w_up)), w_down)
        }
        FfnWeights::Siaf { branches, w2 } => {
            let parts = branches
                .iter()
                .zip(acts)
                .map(|(br, &act)| b.affine_activation(&b.matmul(x, &br.w1), act, &br.scale, &br.bias))
                .collect();
            b.matmul(&sum_all(b, parts), w2)
        }
    }
}

pub fn branch_activations(cfg: &ModelConfig) -> Vec<Activation> {
    (0..cfg.effective_siaf_n()).map(|i| cfg.branch_activation(i)).collect()
}

/// One pre-norm decoder block.
pub fn block<T: Scalar, B: Backend<T>>(
    b: &B,
    x: &B::M,
    layer: &LayerWeights<B::M>,
    cfg: &ModelConfig,
    opts: &AttnOpts<'_>,
) -> B::M {
    let eps = T::of(cfg.norm_eps);
    let xn = b.rms_norm(x, &layer.attn_norm, eps);
    let (attn, _) = msa(b, &xn, &layer.attn, opts, false);
    let mut h = b.add(x, &attn);
    if cfg.block_style == BlockStyle::PanguPi {
        for sc in &layer.shortcuts {
            h = b.add(&h, &shortcut(b, &xn, sc, cfg.base_activation));
        }
    }
    let hn = b.rms_norm(&h, &layer.ffn_norm, eps);
    let f = ffn(b, &hn, &layer.ffn, &branch_activations(cfg));
    b.add(&h, &f)
}

/// Embedding, blocks, final norm and output projection over `tokens`, which
/// holds whole sequences of `seq_len` tokens back to back.
pub fn forward<T: Scalar, B: Backend<T>>(
    b: &B,
    w: &Weights<B::M>,
    cfg: &ModelConfig,
    tokens: &[usize],
    seq_len: usize,
    capture: bool,
) -> (B::M, Vec<B::M>) {
    let x = b.gather_rows(&w.tok_emb, tokens);
    forward_embedded(b, w, cfg, x, seq_len, capture)
}

/// [`forward`] starting from already embedded rows.
pub fn forward_embedded<T: Scalar, B: Backend<T>>(
    b: &B,
    w: &Weights<B::M>,
    cfg: &ModelConfig,
    mut x: B::M,
    seq_len: usize,
    capture: bool,
) -> (B::M, Vec<B::M>) {
    let positions: Vec<usize> = (0..seq_len).collect();
    let opts = AttnOpts {
        causal: true,
        seq_len,
        rope: Some((&positions, cfg.rope_base)),
    };
    let mut hidden = Vec::new();
    for layer in &w.layers {
        x = block(b, &x, layer, cfg, &opts);
        if capture {
            hidden.push(x.clone());
        }
    }
    let xn = b.rms_norm(&x, &w.final_norm, T::of(cfg.norm_eps));
    (b.matmul(&xn, &w.lm_head), hidden)
}
