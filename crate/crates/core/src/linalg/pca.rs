use crate::error::{Error, Result};
use crate::linalg::diversity::ensure_finite;
use crate::linalg::eigen::symmetric_eigen;
use crate::Scalar;
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Tolerance on cumulative explained-variance comparisons.
const RATIO_TOL: f64 = 1e-12;

/// Sample covariance of the column-centered data (denominator N − 1).
pub fn covariance<T: Scalar>(f: ArrayView2<'_, T>) -> Result<Array2<f64>> {
    let n = f.nrows();
    if n < 2 {
        return Err(Error::invalid("covariance needs at least two rows"));
    }
    ensure_finite(f, "PCA input")?;
    let centered = center(f);
    Ok(centered.t().dot(&centered) / (n - 1) as f64)
}

fn center<T: Scalar>(f: ArrayView2<'_, T>) -> Array2<f64> {
    let f64m = f.mapv(|x| x.as_f64());
    let mean = f64m.mean_axis(Axis(0)).expect("non-empty");
    f64m - &mean.insert_axis(Axis(0))
}

fn spectrum(cov: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let eig = symmetric_eigen(cov)?;
    Ok((eig.values.mapv(|x| x.max(0.0)), eig.vectors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffectiveDim {
    /// The centered matrix is identically zero.
    NoVariance,
    Components(usize),
}

impl EffectiveDim {
    pub fn count(self) -> usize {
        match self {
            EffectiveDim::NoVariance => 0,
            EffectiveDim::Components(k) => k,
        }
    }
}

/// Smallest number of principal components whose explained-variance ratio
/// reaches `epsilon`.
pub fn effective_dimension<T: Scalar>(f: ArrayView2<'_, T>, epsilon: f64) -> Result<EffectiveDim> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside (0, 1]")));
    }
    let cov = covariance(f)?;
    let (values, _) = spectrum(cov.view())?;
    let total: f64 = values.sum();
    if total <= 0.0 {
        return Ok(EffectiveDim::NoVariance);
    }
    let mut acc = 0.0;
    for (k, v) in values.iter().enumerate() {
        acc += v;
        if acc / total >= epsilon - RATIO_TOL {
            return Ok(EffectiveDim::Components(k + 1));
        }
    }
    Ok(EffectiveDim::Components(values.len()))
}

#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// N×k coordinates of the centered data in the top-k directions.
    pub coordinates: Array2<f64>,
    /// Fraction of total variance captured by the k directions.
    pub explained: f64,
    /// d×k principal directions.
    pub directions: Array2<f64>,
}

/// Projection onto the top-`k` principal directions. Each direction's
/// largest-magnitude component is made positive.
pub fn pca_top_k<T: Scalar>(f: ArrayView2<'_, T>, k: usize) -> Result<PcaProjection> {
    let (n, d) = f.dim();
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!("k = {k} must lie in [1, min(N, d) = {}]", n.min(d))));
    }
    let cov = covariance(f)?;
    let (values, vectors) = spectrum(cov.view())?;
    let total: f64 = values.sum();
    if total <= 0.0 {
        return Ok(PcaProjection {
            coordinates: Array2::zeros((n, k)),
            explained: 0.0,
            directions: Array2::zeros((d, k)),
        });
    }
    let mut directions = vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut col in directions.columns_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
    let coordinates = center(f).dot(&directions);
    let explained = (values.iter().take(k).sum::<f64>() / total).min(1.0);
    Ok(PcaProjection {
        coordinates,
        explained,
        directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};

    #[test]
    fn rank_one_needs_one_component() {
        let f = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - 2.0) * (j as f64 + 1.0));
        assert_eq!(effective_dimension(f.view(), 0.8).unwrap(), EffectiveDim::Components(1));
    }

    #[test]
    fn isotropic_needs_all() {
        let mut rng = seeded(11);
        let f = gaussian::<f64>(&mut rng, 1000, 8, 1.0);
        assert_eq!(effective_dimension(f.view(), 1.0).unwrap(), EffectiveDim::Components(8));
    }

    #[test]
    fn zero_variance_reported_distinctly() {
        let f = Array2::<f64>::from_elem((5, 3), 2.5);
        assert_eq!(effective_dimension(f.view(), 0.8).unwrap(), EffectiveDim::NoVariance);
        let p = pca_top_k(f.view(), 2).unwrap();
        assert_eq!(p.explained, 0.0);
        assert!(p.coordinates.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn line_data_fully_explained() {
        let f = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { i as f64 } else { 2.0 * i as f64 + 1.0 });
        let p = pca_top_k(f.view(), 1).unwrap();
        assert!((p.explained - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = Array2::<f64>::zeros((4, 3));
        assert!(effective_dimension(f.view(), 0.0).is_err());
        assert!(effective_dimension(f.view(), 1.5).is_err());
        assert!(pca_top_k(f.view(), 4).is_err());
        assert!(effective_dimension(Array2::<f64>::zeros((1, 3)).view(), 0.5).is_err());
    }
}
