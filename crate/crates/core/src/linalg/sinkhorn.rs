use crate::Scalar;
use ndarray::{Array2, ArrayView2, Axis};

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Alternating column/row normalization of a positive matrix. Finishes on
/// a row pass so the result is exactly row-stochastic up to rounding.
pub fn sinkhorn<T: Scalar>(a: ArrayView2<'_, T>, iterations: usize) -> Array2<T> {
    let mut m = a.to_owned();
    for _ in 0..iterations {
        let col_sums = m.sum_axis(Axis(0));
        for mut row in m.rows_mut() {
            row.zip_mut_with(&col_sums, |x, &c| *x = *x / c);
        }
        for mut row in m.rows_mut() {
            let s: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / s);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};

    #[test]
    fn sinkhorn_yields_doubly_stochastic() {
        let mut rng = seeded(5);
        let logits = gaussian::<f64>(&mut rng, 12, 12, 1.0);
        let a = sinkhorn(softmax_rows(logits.view()).view(), 50);
        for s in a.sum_axis(Axis(1)).iter().chain(a.sum_axis(Axis(0)).iter()) {
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(a.iter().all(|&x| x > 0.0));
    }
}
