//! Spectral constants for the checks. Power iteration is tried first; if
//! it exhausts its budget (tiny eigengaps), the constant is recomputed by
//! a dense symmetric eigensolve and the fallback is counted.

use crate::error::{Error, Result};
use crate::linalg::{attention_contraction, projected_gram_contraction, spectral_norm, symmetric_eigen, PowerConfig};
use ndarray::{Array2, Axis};
use std::cell::Cell;

pub(crate) struct Spectral {
    pub power: PowerConfig,
    fallbacks: Cell<usize>,
}

fn top_eigenvalue(m: &Array2<f64>) -> Result<f64> {
    Ok(symmetric_eigen(m.view())?.values.first().copied().unwrap_or(0.0).max(0.0))
}

fn projected_gram(a: &Array2<f64>) -> Array2<f64> {
    let means = a.mean_axis(Axis(0)).expect("nonempty");
    let pa = a - &means.insert_axis(Axis(0));
    pa.t().dot(&pa)
}

impl Spectral {
    pub fn new() -> Self {
        Self {
            power: PowerConfig::default(),
            fallbacks: Cell::new(0),
        }
    }

    pub fn fallbacks(&self) -> usize {
        self.fallbacks.get()
    }

    fn or_dense(&self, iterated: Result<f64>, dense: impl FnOnce() -> Result<f64>) -> Result<f64> {
        match iterated {
            Err(Error::NoConvergence { .. }) => {
                self.fallbacks.set(self.fallbacks.get() + 1);
                dense()
            }
            other => other,
        }
    }

    /// Largest singular value.
    pub fn norm(&self, w: &Array2<f64>) -> Result<f64> {
        let iterated = spectral_norm(w.view(), &self.power).map(|s| s.s);
        self.or_dense(iterated, || Ok(top_eigenvalue(&w.t().dot(w))?.sqrt()))
    }

    /// `λ_max(Aᵀ(I − eeᵀ)A)` for a row-stochastic `A`.
    pub fn attention_lambda(&self, a: &Array2<f64>) -> Result<f64> {
        let iterated = attention_contraction(a.view(), &self.power).map(|s| s.lambda_max);
        self.or_dense(iterated, || top_eigenvalue(&projected_gram(a)))
    }

    /// Same operator for an arbitrary square matrix such as an attention
    /// perturbation.
    pub fn perturbation_lambda(&self, delta: &Array2<f64>) -> Result<f64> {
        let iterated = projected_gram_contraction(delta.view(), &self.power).map(|s| s.lambda_max);
        self.or_dense(iterated, || top_eigenvalue(&projected_gram(delta)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, seeded};

    #[test]
    fn dense_fallback_agrees_with_power_iteration() {
        let w = gaussian::<f64>(&mut seeded(2), 12, 9, 1.0);
        let starved = Spectral {
            power: PowerConfig {
                max_iter: 1,
                ..PowerConfig::default()
            },
            fallbacks: Cell::new(0),
        };
        let full = Spectral::new();
        let a = starved.norm(&w).unwrap();
        let b = full.norm(&w).unwrap();
        assert_eq!(starved.fallbacks(), 1);
        assert_eq!(full.fallbacks(), 0);
        assert!((a - b).abs() <= 1e-10 * b);
    }
}
