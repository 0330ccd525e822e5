//! Eager, shape-checked entry points for the individual modules. These are
//! what the theory checks and the analysis tools call.

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, Activation};
use crate::model::config::ModelConfig;
use crate::model::layers::{self, AttnOpts};
use crate::model::weights::{AttentionWeights, FfnWeights, LayerWeights, ShortcutWeights, SiafBranchWeights};
use crate::ops::{rms_norm_kernel, rope_kernel, softmax_kernel, Eager};
use crate::Scalar;
use ndarray::{Array2, ArrayView2};

fn expect_dims<T>(op: &'static str, what: &str, m: &Array2<T>, rows: usize, cols: usize) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::shape(
            op,
            format!("{what} is {:?}, expected ({rows}, {cols})", m.dim()),
        ));
    }
    Ok(())
}

fn check_attention_weights<T: Scalar>(op: &'static str, d: usize, w: &AttentionWeights<Array2<T>>) -> Result<usize> {
    let h = w.n_heads();
    if h == 0 || w.wq.len() != h || w.wk.len() != h {
        return Err(Error::shape(op, "query, key and value head counts must agree and be nonzero"));
    }
    if d % h != 0 {
        return Err(Error::shape(op, format!("d = {d} not divisible by {h} heads")));
    }
    let dh = d / h;
    for i in 0..h {
        expect_dims(op, "W^q", &w.wq[i], d, dh)?;
        expect_dims(op, "W^k", &w.wk[i], d, dh)?;
        expect_dims(op, "W^v", &w.wv[i], d, dh)?;
    }
    expect_dims(op, "W^o", &w.wo, d, d)?;
    Ok(h)
}

/// Output of an attention sublayer together with its attention matrices.
#[derive(Clone, Debug)]
pub struct MsaOutput<T> {
    pub output: Array2<T>,
    /// One N×N matrix per head.
    pub attention: Vec<Array2<T>>,
}

/// `softmax((Z·W^q)(Z·W^k)ᵀ / √(d/H))` for one head.
pub fn attention_matrix<T: Scalar>(
    z: ArrayView2<'_, T>,
    wq: ArrayView2<'_, T>,
    wk: ArrayView2<'_, T>,
    causal: bool,
) -> Result<Array2<T>> {
    if wq.nrows() != z.ncols() || wk.dim() != wq.dim() {
        return Err(Error::shape(
            "attention_matrix",
            format!("Z {:?}, W^q {:?}, W^k {:?}", z.dim(), wq.dim(), wk.dim()),
        ));
    }
    let scale = T::of(1.0 / (wq.ncols() as f64).sqrt());
    let logits = z.dot(&wq).dot(&z.dot(&wk).t()) * scale;
    ensure_finite(logits.view(), "attention logits")?;
    Ok(softmax_kernel(logits.view(), causal))
}

pub fn msa_forward<T: Scalar>(z: &Array2<T>, w: &AttentionWeights<Array2<T>>, causal: bool) -> Result<MsaOutput<T>> {
    check_attention_weights("msa_forward", z.ncols(), w)?;
    let opts = AttnOpts {
        causal,
        ..AttnOpts::plain(z.nrows())
    };
    let (output, attention) = layers::msa(&Eager, z, w, &opts, true);
    ensure_finite(output.view(), "msa output")?;
    Ok(MsaOutput { output, attention })
}

/// MSA with caller-supplied attention matrices (for example Sinkhorn
/// projected ones).
pub fn msa_with_attention<T: Scalar>(
    z: &Array2<T>,
    attention: &[Array2<T>],
    w: &AttentionWeights<Array2<T>>,
) -> Result<Array2<T>> {
    let h = check_attention_weights("msa_with_attention", z.ncols(), w)?;
    if attention.len() != h {
        return Err(Error::shape("msa_with_attention", format!("{} attention matrices for {h} heads", attention.len())));
    }
    for a in attention {
        expect_dims("msa_with_attention", "A", a, z.nrows(), z.nrows())?;
    }
    Ok(layers::msa_given_attention(&Eager, z, attention, w))
}

fn check_shortcut<T: Scalar>(d: usize, sc: &ShortcutWeights<Array2<T>>) -> Result<()> {
    match sc {
        ShortcutWeights::Dense { theta } => expect_dims("shortcut", "Θ", theta, d, d),
        ShortcutWeights::Bottleneck { w_down, w_up } => {
            let k = w_down.ncols();
            expect_dims("shortcut", "W_down", w_down, d, k)?;
            expect_dims("shortcut", "W_up", w_up, k, d)
        }
    }
}

/// `σ(Z·W_down)·W_up`.
pub fn bottleneck_shortcut<T: Scalar>(z: &Array2<T>, w_down: &Array2<T>, w_up: &Array2<T>, act: Activation) -> Result<Array2<T>> {
    let sc = ShortcutWeights::Bottleneck {
        w_down: w_down.clone(),
        w_up: w_up.clone(),
    };
    shortcut_forward(z, &sc, act)
}

/// `σ(Z·Θ)`.
pub fn dense_shortcut<T: Scalar>(z: &Array2<T>, theta: &Array2<T>, act: Activation) -> Result<Array2<T>> {
    shortcut_forward(z, &ShortcutWeights::Dense { theta: theta.clone() }, act)
}

pub fn shortcut_forward<T: Scalar>(z: &Array2<T>, sc: &ShortcutWeights<Array2<T>>, act: Activation) -> Result<Array2<T>> {
    check_shortcut(z.ncols(), sc)?;
    Ok(layers::shortcut(&Eager, z, sc, act))
}

/// `MSA(Z) + Z + Σ_i shortcut_i(Z)`.
pub fn aug_msa_forward<T: Scalar>(
    z: &Array2<T>,
    w: &AttentionWeights<Array2<T>>,
    shortcuts: &[ShortcutWeights<Array2<T>>],
    act: Activation,
    causal: bool,
) -> Result<MsaOutput<T>> {
    let MsaOutput { output, attention } = msa_forward(z, w, causal)?;
    let mut out = z + &output;
    for sc in shortcuts {
        out += &shortcut_forward(z, sc, act)?;
    }
    Ok(MsaOutput { output: out, attention })
}

/// One term `σ(a·x + b)` of a series activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiafBranch {
    pub scale: f64,
    pub bias: f64,
    pub activation: Activation,
}

/// `Σ_i σ_i(a_i·x + b_i)`.
pub fn siaf<T: Scalar>(x: T, branches: &[SiafBranch]) -> Result<T> {
    if branches.is_empty() {
        return Err(Error::invalid("series activation needs at least one branch"));
    }
    let mut terms = branches
        .iter()
        .map(|br| br.activation.apply(T::of(br.scale) * x + T::of(br.bias)));
    let first = terms.next().expect("nonempty");
    Ok(terms.fold(first, |acc, t| acc + t))
}

/// `(Σ_i σ_i(a_i·Z·W1_i + b_i))·W2` with a shared second projection.
pub fn siaf_mlp_forward<T: Scalar>(
    z: &Array2<T>,
    branches: &[SiafBranchWeights<Array2<T>>],
    acts: &[Activation],
    w2: &Array2<T>,
) -> Result<Array2<T>> {
    if branches.is_empty() || branches.len() != acts.len() {
        return Err(Error::shape(
            "siaf_mlp_forward",
            format!("{} branches with {} activations", branches.len(), acts.len()),
        ));
    }
    let d_ff = w2.nrows();
    for br in branches {
        expect_dims("siaf_mlp_forward", "W1_i", &br.w1, z.ncols(), d_ff)?;
        expect_dims("siaf_mlp_forward", "a_i", &br.scale, 1, 1)?;
        expect_dims("siaf_mlp_forward", "b_i", &br.bias, 1, 1)?;
    }
    let f = FfnWeights::Siaf {
        branches: branches.to_vec(),
        w2: w2.clone(),
    };
    Ok(layers::ffn(&Eager, z, &f, acts))
}

/// `σ(Z·W1)·W2`.
pub fn mlp_forward<T: Scalar>(z: &Array2<T>, w1: &Array2<T>, w2: &Array2<T>, act: Activation) -> Result<Array2<T>> {
    expect_dims("mlp_forward", "W1", w1, z.ncols(), w2.nrows())?;
    let f = FfnWeights::Mlp {
        w1: w1.clone(),
        w2: w2.clone(),
    };
    Ok(layers::ffn(&Eager, z, &f, &[act]))
}

pub fn rms_normalize<T: Scalar>(z: &Array2<T>, gains: &Array2<T>, eps: T) -> Result<Array2<T>> {
    expect_dims("rms_normalize", "gains", gains, 1, z.ncols())?;
    Ok(rms_norm_kernel(z.view(), gains.view(), eps).0)
}

pub fn rope_apply<T: Scalar>(rows: &Array2<T>, positions: &[usize], base: T) -> Result<Array2<T>> {
    if rows.ncols() % 2 != 0 {
        return Err(Error::shape("rope_apply", format!("odd head dimension {}", rows.ncols())));
    }
    if positions.len() != rows.nrows() {
        return Err(Error::shape("rope_apply", format!("{} positions for {} rows", positions.len(), rows.nrows())));
    }
    Ok(rope_kernel(rows.view(), positions, base, false))
}

/// A causal decoder block over one sequence at positions `0..N`.
pub fn block_forward<T: Scalar>(z: &Array2<T>, layer: &LayerWeights<Array2<T>>, cfg: &ModelConfig) -> Result<Array2<T>> {
    cfg.validate()?;
    let d = cfg.d_model;
    if z.ncols() != d {
        return Err(Error::shape("block_forward", format!("input has {} columns, d_model is {d}", z.ncols())));
    }
    check_attention_weights("block_forward", d, &layer.attn)?;
    for sc in &layer.shortcuts {
        check_shortcut(d, sc)?;
    }
    let positions: Vec<usize> = (0..z.nrows()).collect();
    let opts = AttnOpts {
        causal: true,
        seq_len: z.nrows(),
        rope: Some((&positions, cfg.rope_base)),
    };
    Ok(layers::block(&Eager, z, layer, cfg, &opts))
}
