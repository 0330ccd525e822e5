use crate::error::{Error, Result};
use crate::linalg::diversity::ensure_finite;
use crate::rng::seeded;
use crate::Scalar;
use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Power-iteration settings. Relative residual tolerance, iteration cap and
/// the seed for the start vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
            seed: 0x5EED,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralSummary {
    /// Largest singular value (square root of `lambda_max`).
    pub s: f64,
    /// Largest eigenvalue of the symmetric PSD operator that was iterated.
    pub lambda_max: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Operators whose trace falls below this fraction of the input scale are
/// too close to rounding noise to iterate on; their trace is reported.
const ZERO_EIGEN_FRACTION: f64 = 1e-14;

/// Top eigenpair of a symmetric PSD operator given only its action and
/// trace. Near-zero operators report the trace, which bounds `λ_max` from
/// above.
fn power_iterate<F>(dim: usize, scale: f64, trace: f64, cfg: &PowerConfig, apply: F) -> Result<SpectralSummary>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    if dim == 0 {
        return Err(Error::invalid("power iteration on an empty operator"));
    }
    let zero_floor = ZERO_EIGEN_FRACTION * scale.max(f64::MIN_POSITIVE);
    let trace_bound = |iterations: usize| SpectralSummary {
        s: trace.max(0.0).sqrt(),
        lambda_max: trace.max(0.0),
        iterations,
        residual: 0.0,
    };
    if trace <= zero_floor {
        return Ok(trace_bound(0));
    }
    let mut rng = seeded(cfg.seed);
    let mut v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
    let norm = v.dot(&v).sqrt();
    v /= norm;

    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let w = apply(v.view());
        let mu = v.dot(&w);
        let w_norm = w.dot(&w).sqrt();
        if w_norm <= zero_floor {
            return Ok(trace_bound(it));
        }
        let r = &w - &(&v * mu);
        residual = r.dot(&r).sqrt() / mu.max(zero_floor);
        v = w / w_norm;
        if residual <= cfg.tol {
            // Rayleigh quotient at the updated vector is at least as accurate.
            let w = apply(v.view());
            let lambda = v.dot(&w).max(mu).max(0.0);
            return Ok(SpectralSummary {
                s: lambda.sqrt(),
                lambda_max: lambda,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual,
    })
}

/// Largest singular value of `w` by power iteration on `WᵀW`.
pub fn spectral_norm<T: Scalar>(w: ArrayView2<'_, T>, cfg: &PowerConfig) -> Result<SpectralSummary> {
    ensure_finite(w, "spectral_norm input")?;
    let w64 = w.mapv(|x| x.as_f64());
    let scale: f64 = w64.iter().map(|x| x * x).sum();
    power_iterate(w64.ncols(), scale, scale, cfg, |v| w64.t().dot(&w64.dot(&v)))
}

/// Largest eigenvalue of `Aᵀ(I − eeᵀ)A` for any square `A`.
///
/// Used directly for attention perturbations, whose rows sum to zero.
pub fn projected_gram_contraction<T: Scalar>(
    a: ArrayView2<'_, T>,
    cfg: &PowerConfig,
) -> Result<SpectralSummary> {
    ensure_finite(a, "attention matrix")?;
    if a.is_empty() {
        return Err(Error::invalid("contraction of an empty matrix"));
    }
    let a64 = a.mapv(|x| x.as_f64());
    let scale: f64 = a64.iter().map(|x| x * x).sum();
    let col_means = a64.mean_axis(Axis(0)).expect("nonempty");
    let trace: f64 = (&a64 - &col_means.insert_axis(Axis(0))).iter().map(|x| x * x).sum();
    power_iterate(a64.ncols(), scale, trace, cfg, |v| {
        let mut av = a64.dot(&v);
        let mean = av.mean().unwrap_or(0.0);
        av -= mean;
        a64.t().dot(&av)
    })
}

/// Contraction constant of a row-stochastic attention matrix.
pub fn attention_contraction<T: Scalar>(
    a: ArrayView2<'_, T>,
    cfg: &PowerConfig,
) -> Result<SpectralSummary> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(
            "attention_contraction",
            format!("expected square matrix, got {}x{}", a.nrows(), a.ncols()),
        ));
    }
    ensure_finite(a, "attention matrix")?;
    for (i, row) in a.rows().into_iter().enumerate() {
        let sum: f64 = row.iter().map(|x| x.as_f64()).sum();
        let min = row.iter().map(|x| x.as_f64()).fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > 1e-9 || min < 0.0 {
            return Err(Error::NotStochastic { row: i, sum, min });
        }
    }
    projected_gram_contraction(a, cfg)
}
