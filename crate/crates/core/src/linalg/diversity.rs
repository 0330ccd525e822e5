use crate::error::{Error, Result};
use crate::Scalar;
use ndarray::{Array2, ArrayView2, Axis};

/// Above this row count the projector is applied in factored form instead
/// of being materialized as an N×N matrix.
const DENSE_PROJECTOR_MAX_ROWS: usize = 1024;

/// A finite N×d matrix of token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T: Scalar>(Array2<T>);

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("feature matrix must have at least one row and column"));
        }
        ensure_finite(values.view(), "feature matrix")?;
        Ok(Self(values))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.0
    }
}

pub fn ensure_finite<T: Scalar>(m: ArrayView2<'_, T>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
        })
    }
}

pub fn frobenius<T: Scalar>(m: ArrayView2<'_, T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// The projector `I − eeᵀ` with `e = N^(−1/2)·1`.
pub fn projector<T: Scalar>(n: usize) -> Array2<T> {
    let off = -T::one() / T::of(n as f64);
    let mut p = Array2::from_elem((n, n), off);
    for i in 0..n {
        p[[i, i]] = T::one() + off;
    }
    p
}

/// Distance from `h` to the subspace of matrices with identical rows,
/// computed as `‖(I − eeᵀ)H‖_F`.
pub fn diversity<T: Scalar>(h: ArrayView2<'_, T>) -> Result<T> {
    ensure_finite(h, "diversity input")?;
    let n = h.nrows();
    if n <= DENSE_PROJECTOR_MAX_ROWS {
        Ok(frobenius(projector::<T>(n).dot(&h).view()))
    } else {
        // e(eᵀH) with e = N^(-1/2)·1
        let scale = T::one() / T::of(n as f64).sqrt();
        let et_h = h.sum_axis(Axis(0)).mapv(|v| v * scale);
        let mut acc = T::zero();
        for row in h.rows() {
            for (&x, &c) in row.iter().zip(et_h.iter()) {
                let r = x - c * scale;
                acc += r * r;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Least-squares form `min_x ‖H − 1xᵀ‖_F`, solved by the column mean.
pub fn diversity_oracle<T: Scalar>(h: ArrayView2<'_, T>) -> Result<T> {
    ensure_finite(h, "diversity input")?;
    let mean = h
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::invalid("diversity of an empty matrix"))?;
    let centered = &h - &mean.insert_axis(Axis(0));
    Ok(frobenius(centered.view()))
}
