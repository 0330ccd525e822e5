//! Tensor operations used by the model, abstracted over an execution
//! backend. [`Eager`] evaluates immediately on `Array2`; the autodiff tape
//! implements the same trait and records a graph for reverse mode.

use crate::linalg::Activation;
use crate::Scalar;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub trait Backend<T: Scalar> {
    type M: Clone;

    /// A value that does not require gradients.
    fn constant(&self, value: Array2<T>) -> Self::M;
    fn dims(&self, m: &Self::M) -> (usize, usize);
    fn to_array(&self, m: &Self::M) -> Array2<T>;

    fn matmul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    /// `a · bᵀ`
    fn matmul_nt(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn add(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn mul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn scale(&self, a: &Self::M, c: T) -> Self::M;
    fn activation(&self, x: &Self::M, act: Activation) -> Self::M;
    /// `σ(a·x + b)` with `a`, `b` given as 1×1 matrices.
    fn affine_activation(&self, x: &Self::M, act: Activation, a: &Self::M, b: &Self::M) -> Self::M;
    /// Row-wise RMS normalization followed by a 1×d gain.
    fn rms_norm(&self, x: &Self::M, gain: &Self::M, eps: T) -> Self::M;
    /// Rotary embedding on adjacent column pairs, one position per row.
    fn rope(&self, x: &Self::M, positions: &[usize], base: T) -> Self::M;
    fn softmax_rows(&self, x: &Self::M, causal: bool) -> Self::M;
    fn slice_rows(&self, x: &Self::M, start: usize, len: usize) -> Self::M;
    fn slice_cols(&self, x: &Self::M, start: usize, len: usize) -> Self::M;
    fn concat_rows(&self, parts: &[Self::M]) -> Self::M;
    fn concat_cols(&self, parts: &[Self::M]) -> Self::M;
    fn gather_rows(&self, table: &Self::M, ids: &[usize]) -> Self::M;
    /// Mean next-token negative log-likelihood, 1×1.
    fn cross_entropy(&self, logits: &Self::M, targets: &[usize]) -> Self::M;
    /// `log softmax(logits[row])[target]`, 1×1.
    fn log_prob(&self, logits: &Self::M, row: usize, target: usize) -> Self::M;
}

/// Immediate evaluation on owned arrays.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

pub(crate) fn rms_norm_kernel<T: Scalar>(
    x: ArrayView2<'_, T>,
    gain: ArrayView2<'_, T>,
    eps: T,
) -> (Array2<T>, Vec<T>) {
    let d = T::of(x.ncols() as f64);
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        row.zip_mut_with(&gain.row(0), |v, &g| *v = *v * r * g);
    }
    (out, inv)
}

pub(crate) fn rope_kernel<T: Scalar>(
    x: ArrayView2<'_, T>,
    positions: &[usize],
    base: T,
    inverse: bool,
) -> Array2<T> {
    let cols = x.ncols();
    assert_eq!(cols % 2, 0, "rotary embedding needs an even width");
    assert_eq!(positions.len(), x.nrows(), "one position per row");
    let half = cols / 2;
    let freqs: Vec<T> = (0..half)
        .map(|j| base.powf(-T::of(2.0 * j as f64) / T::of(cols as f64)))
        .collect();
    let mut out = x.to_owned();
    for (mut row, &pos) in out.rows_mut().into_iter().zip(positions) {
        let p = T::of(pos as f64);
        for (j, &f) in freqs.iter().enumerate() {
            let (sin, cos) = (p * f).sin_cos();
            let sin = if inverse { -sin } else { sin };
            let a = row[2 * j];
            let b = row[2 * j + 1];
            row[2 * j] = a * cos - b * sin;
            row[2 * j + 1] = a * sin + b * cos;
        }
    }
    out
}

pub(crate) fn softmax_kernel<T: Scalar>(x: ArrayView2<'_, T>, causal: bool) -> Array2<T> {
    let mut out = x.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let limit = if causal { (i + 1).min(row.len()) } else { row.len() };
        let max = row.iter().take(limit).copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        for v in row.iter_mut().take(limit) {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn log_softmax_row<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub(crate) fn affine_kernel<T: Scalar>(x: ArrayView2<'_, T>, act: Activation, a: T, b: T) -> Array2<T> {
    x.mapv(|v| act.apply(a * v + b))
}

impl<T: Scalar> Backend<T> for Eager {
    type M = Array2<T>;

    fn constant(&self, value: Array2<T>) -> Array2<T> {
        value
    }

    fn dims(&self, m: &Array2<T>) -> (usize, usize) {
        m.dim()
    }

    fn to_array(&self, m: &Array2<T>) -> Array2<T> {
        m.clone()
    }

    fn matmul(&self, a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
        a.dot(b)
    }

    fn matmul_nt(&self, a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
        a.dot(&b.t())
    }

    fn add(&self, a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
        a + b
    }

    fn mul(&self, a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
        a * b
    }

    fn scale(&self, a: &Array2<T>, c: T) -> Array2<T> {
        a * c
    }

    fn activation(&self, x: &Array2<T>, act: Activation) -> Array2<T> {
        x.mapv(|v| act.apply(v))
    }

    fn affine_activation(&self, x: &Array2<T>, act: Activation, a: &Array2<T>, b: &Array2<T>) -> Array2<T> {
        affine_kernel(x.view(), act, a[[0, 0]], b[[0, 0]])
    }

    fn rms_norm(&self, x: &Array2<T>, gain: &Array2<T>, eps: T) -> Array2<T> {
        rms_norm_kernel(x.view(), gain.view(), eps).0
    }

    fn rope(&self, x: &Array2<T>, positions: &[usize], base: T) -> Array2<T> {
        rope_kernel(x.view(), positions, base, false)
    }

    fn softmax_rows(&self, x: &Array2<T>, causal: bool) -> Array2<T> {
        softmax_kernel(x.view(), causal)
    }

    fn slice_rows(&self, x: &Array2<T>, start: usize, len: usize) -> Array2<T> {
        x.slice(s![start..start + len, ..]).to_owned()
    }

    fn slice_cols(&self, x: &Array2<T>, start: usize, len: usize) -> Array2<T> {
        x.slice(s![.., start..start + len]).to_owned()
    }

    fn concat_rows(&self, parts: &[Array2<T>]) -> Array2<T> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("row concat shapes agree")
    }

    fn concat_cols(&self, parts: &[Array2<T>]) -> Array2<T> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(1), &views).expect("column concat shapes agree")
    }

    fn gather_rows(&self, table: &Array2<T>, ids: &[usize]) -> Array2<T> {
        table.select(Axis(0), ids)
    }

    fn cross_entropy(&self, logits: &Array2<T>, targets: &[usize]) -> Array2<T> {
        let mut total = T::zero();
        for (row, &t) in logits.rows().into_iter().zip(targets) {
            total -= log_softmax_row(row)[t];
        }
        Array2::from_elem((1, 1), total / T::of(targets.len() as f64))
    }

    fn log_prob(&self, logits: &Array2<T>, row: usize, target: usize) -> Array2<T> {
        Array2::from_elem((1, 1), log_softmax_row(logits.row(row))[target])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};
    use ndarray::array;

    #[test]
    fn causal_softmax_masks_exactly() {
        let x = Array2::<f64>::zeros((3, 3));
        let a = Eager.softmax_rows(&x, true);
        assert_eq!(a.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(a[[1, 2]], 0.0);
        for r in a.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_guards_zero_rows() {
        let x = array![[0.0, 0.0, 0.0], [2.0, 2.0, 2.0]];
        let g = Array2::<f64>::ones((1, 3));
        let y = Eager.rms_norm(&x, &g, 1e-6);
        assert!(y.row(0).iter().all(|&v| v == 0.0));
        assert!(y.row(1).iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rope_is_isometric_and_invertible() {
        let mut rng = seeded(1);
        let x = gaussian::<f64>(&mut rng, 5, 8, 1.0);
        let pos = [0, 3, 7, 100, 4096];
        let y = rope_kernel(x.view(), &pos, 10_000.0, false);
        let back = rope_kernel(y.view(), &pos, 10_000.0, true);
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            assert!((a.dot(&a) - b.dot(&b)).abs() < 1e-12);
        }
        assert!((&back - &x).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(y.row(0), x.row(0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let logits = Array2::<f64>::zeros((4, 7));
        let loss = Eager.cross_entropy(&logits, &[0, 1, 2, 6]);
        assert!((loss[[0, 0]] - 7f64.ln()).abs() < 1e-14);
    }
}
