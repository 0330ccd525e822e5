use super::instance::{attention_weights, Dims};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use super::spectral::Spectral;
use crate::linalg::{diversity, frobenius, sinkhorn, Activation, ActivationSpec};
use crate::model::{attention_matrix, dense_shortcut, mlp_forward, msa_with_attention, siaf_mlp_forward, AttentionWeights, SiafBranchWeights};
use crate::rng::{derive_seed, gaussian, seeded};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Target contraction of each calibrated module.
const TARGET_FACTOR: f64 = 0.9;
const SINKHORN_ITERS: usize = 50;
const SHORTCUT_STREAM: u64 = 0x5C0F_F00D;
const MLP_STREAM: u64 = 0x00F1_F0F1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollapseVariant {
    /// Attention only, no residual.
    Vanilla,
    /// Attention plus identity plus one nonlinear shortcut.
    Augmsa,
    Mlp,
    Siaf,
    /// Attention followed by an MLP in every layer.
    Combined,
}

impl CollapseVariant {
    pub const ALL: [CollapseVariant; 5] = [
        CollapseVariant::Vanilla,
        CollapseVariant::Augmsa,
        CollapseVariant::Mlp,
        CollapseVariant::Siaf,
        CollapseVariant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollapseVariant::Vanilla => "vanilla",
            CollapseVariant::Augmsa => "augmsa",
            CollapseVariant::Mlp => "mlp",
            CollapseVariant::Siaf => "siaf",
            CollapseVariant::Combined => "combined",
        }
    }
}

impl fmt::Display for CollapseVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CollapseVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        CollapseVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown collapse variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub layer: usize,
    pub measured: f64,
    pub bound: f64,
    /// Bound growth factor of the layer that produced this point (1 at layer 0).
    pub factor: f64,
    /// Smallest diversity the measurement can resolve, `N·ε·‖Z_l‖_F`.
    pub resolution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub variant: CollapseVariant,
    pub points: Vec<DecayPoint>,
    /// Explicit weight multiplier, or the calibrated per-module contraction
    /// target when none was given.
    pub weight_scale: f64,
    pub calibrated: bool,
    /// The propagation hit a non-finite value and the curve was truncated.
    pub diverged: bool,
}

impl DecayCurve {
    /// `d_M(Z_L) / d_M(Z_0)` at the last recorded layer.
    pub fn final_ratio(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) if a.measured > 0.0 => b.measured / a.measured,
            _ => f64::NAN,
        }
    }

    pub fn final_bound_ratio(&self) -> f64 {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) if a.bound > 0.0 => b.bound / a.bound,
            _ => f64::NAN,
        }
    }

    /// Whether the bound dominates the measurement at every layer, up to
    /// `rel_tol` and the measurement resolution.
    pub fn dominated(&self, rel_tol: f64) -> bool {
        self.points
            .iter()
            .all(|p| p.measured <= p.bound * (1.0 + rel_tol) + p.resolution)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,measured,bound\n");
        for p in &self.points {
            out.push_str(&format!("{},{:e},{:e}\n", p.layer, p.measured, p.bound));
        }
        out
    }

    pub fn file_name(&self) -> String {
        format!("decay_{}.csv", self.variant)
    }

    /// Writes `decay_<variant>.csv` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        write_atomic(&path, self.to_csv().as_bytes())?;
        Ok(path)
    }
}

fn finite(m: &Array2<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn rms_rows(z: &Array2<f64>) -> Array2<f64> {
    let ms = z.mapv(|x| x * x).mean_axis(Axis(1)).expect("nonempty");
    let inv = ms.mapv(|m| 1.0 / (m + 1e-12).sqrt());
    z * &inv.insert_axis(Axis(1))
}

struct Layer {
    attn: Option<AttentionWeights<Array2<f64>>>,
    theta: Option<Array2<f64>>,
    mlp: Option<MlpWeights>,
}

enum MlpWeights {
    Plain { w1: Array2<f64>, w2: Array2<f64> },
    Siaf { branches: Vec<SiafBranchWeights<Array2<f64>>>, w2: Array2<f64> },
}

const MLP_ACT: Activation = Activation::Gelu;
const SIAF_ACTS: [Activation; 2] = [Activation::Relu, Activation::Gelu];

/// Rescales `W^v` and `W^o` so that `s·υ₁ = target`, split evenly.
fn calibrate_attention(w: &mut AttentionWeights<Array2<f64>>, target: f64, spectral: &Spectral) -> Result<()> {
    let mut s = 0.0f64;
    for v in &w.wv {
        s = s.max(spectral.norm(v)?);
    }
    let upsilon = spectral.norm(&w.wo)?;
    let half = target.sqrt();
    for v in &mut w.wv {
        *v *= half / s;
    }
    w.wo *= half / upsilon;
    Ok(())
}

fn sample_layer(
    variant: CollapseVariant,
    dims: &Dims,
    seed: u64,
    l: usize,
    weight_scale: Option<f64>,
    spectral: &Spectral,
) -> Result<Layer> {
    let d = dims.d;
    let with_attn = matches!(variant, CollapseVariant::Vanilla | CollapseVariant::Augmsa | CollapseVariant::Combined);
    let attn = if with_attn {
        let mut rng = seeded(derive_seed(seed, l as u64));
        let mut w = attention_weights(&mut rng, d, dims.heads);
        match weight_scale {
            Some(c) => {
                for v in &mut w.wv {
                    *v *= c;
                }
                w.wo *= c;
            }
            None => calibrate_attention(&mut w, TARGET_FACTOR / (dims.heads as f64).sqrt(), spectral)?,
        }
        Some(w)
    } else {
        None
    };
    let theta = (variant == CollapseVariant::Augmsa).then(|| {
        let mut rng = seeded(derive_seed(seed ^ SHORTCUT_STREAM, l as u64));
        gaussian::<f64>(&mut rng, d, d, 1.0 / (d as f64).sqrt())
    });
    let mlp = if matches!(variant, CollapseVariant::Mlp | CollapseVariant::Siaf | CollapseVariant::Combined) {
        let mut rng = seeded(derive_seed(seed ^ MLP_STREAM, l as u64));
        let d_ff = 2 * d;
        let std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (d_ff as f64).sqrt();
        let mut m = if variant == CollapseVariant::Siaf {
            let branches = SIAF_ACTS
                .iter()
                .map(|_| SiafBranchWeights {
                    w1: gaussian(&mut rng, d, d_ff, std),
                    scale: Array2::ones((1, 1)),
                    bias: Array2::zeros((1, 1)),
                })
                .collect();
            MlpWeights::Siaf {
                branches,
                w2: gaussian(&mut rng, d_ff, d, ff_std),
            }
        } else {
            MlpWeights::Plain {
                w1: gaussian(&mut rng, d, d_ff, std),
                w2: gaussian(&mut rng, d_ff, d, ff_std),
            }
        };
        let c = match weight_scale {
            Some(c) => c,
            None => (TARGET_FACTOR / mlp_factor(&m, spectral)?).sqrt(),
        };
        match &mut m {
            MlpWeights::Plain { w1, w2 } => {
                *w1 *= c;
                *w2 *= c;
            }
            MlpWeights::Siaf { branches, w2 } => {
                for b in branches {
                    b.w1 *= c;
                }
                *w2 *= c;
            }
        }
        Some(m)
    } else {
        None
    };
    Ok(Layer { attn, theta, mlp })
}

fn mlp_factor(m: &MlpWeights, spectral: &Spectral) -> Result<f64> {
    match m {
        MlpWeights::Plain { w1, w2 } => Ok(ActivationSpec::new(MLP_ACT).lipschitz * spectral.norm(w1)? * spectral.norm(w2)?),
        MlpWeights::Siaf { branches, w2 } => {
            let mut sum = 0.0;
            for (b, act) in branches.iter().zip(SIAF_ACTS) {
                sum += ActivationSpec::new(act).lipschitz * b.scale[[0, 0]].abs() * spectral.norm(&b.w1)?;
            }
            Ok(sum * spectral.norm(w2)?)
        }
    }
}

/// Attention with the pattern computed from row-normalized features and
/// projected to doubly stochastic. Returns output and growth factor.
fn attention_step(
    z: &Array2<f64>,
    w: &AttentionWeights<Array2<f64>>,
    spectral: &Spectral,
) -> Result<(Array2<f64>, f64)> {
    let zn = rms_rows(z);
    let mut attention = Vec::with_capacity(w.n_heads());
    let mut lambda = 0.0f64;
    for (wq, wk) in w.wq.iter().zip(&w.wk) {
        let a = sinkhorn(attention_matrix(zn.view(), wq.view(), wk.view(), false)?.view(), SINKHORN_ITERS);
        lambda = lambda.max(spectral.attention_lambda(&a)?);
        attention.push(a);
    }
    let out = msa_with_attention(z, &attention, w)?;
    let mut s = 0.0f64;
    for v in &w.wv {
        s = s.max(spectral.norm(v)?);
    }
    let factor = (lambda * w.n_heads() as f64).sqrt() * s * spectral.norm(&w.wo)?;
    Ok((out, factor))
}

fn mlp_step(z: &Array2<f64>, m: &MlpWeights, spectral: &Spectral) -> Result<(Array2<f64>, f64)> {
    let out = match m {
        MlpWeights::Plain { w1, w2 } => mlp_forward(z, w1, w2, MLP_ACT)?,
        MlpWeights::Siaf { branches, w2 } => siaf_mlp_forward(z, branches, &SIAF_ACTS, w2)?,
    };
    Ok((out, mlp_factor(m, spectral)?))
}

/// Stacks `depth` freshly sampled modules of `variant`, propagates a
/// random `Z₀` and records `d_M(Z_l)` next to the product-form bound.
///
/// Without `weight_scale` each module is rescaled from measured norms so
/// its bound factor is 0.9 (attention: `s·υ₁ = 0.9/√H`). Attention is
/// Sinkhorn-projected, so the attention factor stays below 0.9.
pub fn collapse_demo(
    variant: CollapseVariant,
    depth: usize,
    dims: &Dims,
    seed: u64,
    weight_scale: Option<f64>,
) -> Result<DecayCurve> {
    if depth == 0 {
        return Err(Error::invalid("collapse depth must be at least 1"));
    }
    if dims.n < 2 || dims.d == 0 || dims.heads == 0 || dims.d % dims.heads != 0 {
        return Err(Error::invalid(format!("invalid collapse dimensions {dims:?}")));
    }
    if let Some(c) = weight_scale {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::invalid(format!("weight scale must be positive, got {c}")));
        }
    }
    let spectral = Spectral::new();
    let mut z: Array2<f64> = gaussian(&mut seeded(derive_seed(seed, u64::MAX)), dims.n, dims.d, 1.0);
    let resolution = |z: &Array2<f64>| dims.n as f64 * f64::EPSILON * frobenius(z.view());
    let d0 = diversity(z.view())?;
    let mut points = vec![DecayPoint {
        layer: 0,
        measured: d0,
        bound: d0,
        factor: 1.0,
        resolution: resolution(&z),
    }];
    let mut bound = d0;
    let mut diverged = false;
    for l in 0..depth {
        let layer = sample_layer(variant, dims, seed, l, weight_scale, &spectral)?;
        let mut factor = 1.0;
        let mut next = z.clone();
        if let Some(w) = &layer.attn {
            let (attn_out, f) = attention_step(&next, w, &spectral)?;
            next = if variant == CollapseVariant::Augmsa {
                let theta = layer.theta.as_ref().expect("augmented layer has a shortcut");
                let lip = ActivationSpec::new(Activation::Relu).lipschitz;
                let shortcut = dense_shortcut(&next, theta, Activation::Relu)?;
                factor *= f + 1.0 + lip * spectral.norm(theta)?;
                &next + &attn_out + &shortcut
            } else {
                factor *= f;
                attn_out
            };
        }
        if let Some(m) = &layer.mlp {
            if !finite(&next) {
                diverged = true;
                break;
            }
            let (out, f) = mlp_step(&next, m, &spectral)?;
            factor *= f;
            next = out;
        }
        if !finite(&next) {
            diverged = true;
            break;
        }
        z = next;
        bound *= factor;
        points.push(DecayPoint {
            layer: l + 1,
            measured: diversity(z.view())?,
            bound,
            factor,
            resolution: resolution(&z),
        });
    }
    Ok(DecayCurve {
        variant,
        points,
        weight_scale: weight_scale.unwrap_or(TARGET_FACTOR),
        calibrated: weight_scale.is_none(),
        diverged,
    })
}
