use crate::error::{Error, Result};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Multiplier applied to numerically estimated Lipschitz constants so the
/// reported value stays an upper bound.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Elementwise nonlinearities. `Gelu` is the tanh form
/// `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
    Tanh,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Relu,
        Activation::Gelu,
        Activation::Swish,
        Activation::Tanh,
        Activation::Identity,
    ];

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::of(0.5);
                let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
                half * x * (T::one() + u.tanh())
            }
            Activation::Swish => x / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Analytic derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::of(0.5);
                let c = T::of(GELU_C);
                let k = T::of(GELU_K);
                let t = (c * (x + k * x * x * x)).tanh();
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
            }
            Activation::Swish => {
                let s = T::one() / (T::one() + (-x).exp());
                s + x * s * (T::one() - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

    /// Whether the function has a derivative discontinuity at 0.
    pub fn has_kink(self) -> bool {
        matches!(self, Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// An activation together with a valid Lipschitz bound for it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: Activation,
    pub lipschitz: f64,
}

impl ActivationSpec {
    /// Estimates the Lipschitz constant on [−10, 10] with 10⁵ grid points.
    pub fn new(kind: Activation) -> Self {
        static CACHE: [OnceLock<f64>; 5] = [const { OnceLock::new() }; 5];
        let slot = Activation::ALL.iter().position(|&k| k == kind).expect("listed");
        let lipschitz = *CACHE[slot].get_or_init(|| {
            lipschitz_estimate(kind, -10.0, 10.0, 100_001).expect("default estimation grid is valid")
        });
        Self { kind, lipschitz }
    }
}

/// Supremum of `|σ′|` over a uniform grid (central differences), times
/// [`LIPSCHITZ_SAFETY`]. ReLU and identity return exactly 1.
pub fn lipschitz_estimate(kind: Activation, lo: f64, hi: f64, grid_points: usize) -> Result<f64> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("lipschitz range [{lo}, {hi}] is empty")));
    }
    if grid_points < 1000 {
        return Err(Error::invalid(format!(
            "lipschitz grid needs at least 1000 points, got {grid_points}"
        )));
    }
    if matches!(kind, Activation::Relu | Activation::Identity) {
        return Ok(1.0);
    }
    let h = 1e-6;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let sup = (0..grid_points)
        .map(|i| {
            let x = lo + step * i as f64;
            ((kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h)).abs()
        })
        .fold(0.0f64, f64::max);
    Ok(sup * LIPSCHITZ_SAFETY)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_constants_are_exact() {
        assert_eq!(lipschitz_estimate(Activation::Relu, -10.0, 10.0, 1000).unwrap(), 1.0);
        assert_eq!(lipschitz_estimate(Activation::Identity, -10.0, 10.0, 1000).unwrap(), 1.0);
    }

    #[test]
    fn gelu_constant_in_expected_range_and_stable() {
        let fine = lipschitz_estimate(Activation::Gelu, -10.0, 10.0, 1_000_000).unwrap();
        let coarse = lipschitz_estimate(Activation::Gelu, -10.0, 10.0, 10_000).unwrap();
        assert!(fine > 1.0 && fine < 1.2, "{fine}");
        assert!((fine - coarse).abs() < 1e-4);
    }

    #[test]
    fn estimates_dominate_analytic_derivative() {
        for kind in Activation::ALL {
            let spec = ActivationSpec::new(kind);
            for i in 0..=4000 {
                let x = -10.0 + 0.005 * i as f64;
                assert!(kind.derivative(x).abs() <= spec.lipschitz, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for kind in [Activation::Gelu, Activation::Swish, Activation::Tanh] {
            for i in 0..200 {
                let x = -6.0 + 0.06 * i as f64;
                let fd = (kind.apply(x + 1e-6) - kind.apply(x - 1e-6)) / 2e-6;
                assert!((fd - kind.derivative(x)).abs() < 1e-8, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn rejects_bad_grid() {
        assert!(lipschitz_estimate(Activation::Gelu, 1.0, -1.0, 5000).is_err());
        assert!(lipschitz_estimate(Activation::Gelu, -1.0, 1.0, 999).is_err());
    }
}
