use super::BoundKind;
use crate::error::{Error, Result};
use crate::linalg::{softmax_rows, Activation};
use crate::model::{AttentionWeights, ShortcutWeights, SiafBranchWeights};
use crate::rng::{gaussian, seeded, SeededRng};
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Problem size of one trial. `heads` is 1 for kinds without attention and
/// `depth` is 1 for single-module kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
}

impl Dims {
    pub fn validate(&self, kind: BoundKind) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.depth == 0 {
            return Err(Error::invalid(format!("{kind}: all dimensions must be positive, got {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::invalid(format!("{kind}: d = {} not divisible by {} heads", self.d, self.heads)));
        }
        if !kind.uses_heads() && self.heads != 1 {
            return Err(Error::invalid(format!("{kind} is single-head, got {} heads", self.heads)));
        }
        let min_depth = match kind {
            BoundKind::Thm8CombinedVanilla | BoundKind::Thm9CombinedPangu => 2,
            _ => 1,
        };
        if self.depth < min_depth || (!kind.is_stack() && self.depth != 1) {
            return Err(Error::invalid(format!("{kind}: depth {} not allowed", self.depth)));
        }
        Ok(())
    }

    /// Draws dimensions for `kind` from `ranges`. For attention kinds the
    /// head count is drawn first and `d` is then a multiple of it.
    pub fn sample(kind: BoundKind, ranges: &DimsRanges, seed: u64) -> Result<Self> {
        ranges.validate()?;
        let mut rng = seeded(seed);
        let n = rng.random_range(ranges.n.0..=ranges.n.1);
        let depth = if kind.is_stack() {
            rng.random_range(ranges.depth.0.max(2)..=ranges.depth.1.max(2))
        } else {
            1
        };
        let (lo, hi) = ranges.d;
        let (heads, d) = if kind.uses_heads() {
            let feasible: Vec<usize> = ranges
                .heads
                .iter()
                .copied()
                .filter(|&h| lo.div_ceil(h) <= hi / h)
                .collect();
            if feasible.is_empty() {
                return Err(Error::invalid(format!("no head count in {:?} divides any d in [{lo}, {hi}]", ranges.heads)));
            }
            let h = feasible[rng.random_range(0..feasible.len())];
            let k = rng.random_range(lo.div_ceil(h)..=hi / h);
            (h, h * k)
        } else {
            (1, rng.random_range(lo..=hi))
        };
        Ok(Self { n, d, heads, depth })
    }
}

/// Inclusive ranges the suite draws trial dimensions from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DimsRanges {
    pub n: (usize, usize),
    pub d: (usize, usize),
    pub heads: Vec<usize>,
    /// Module count for stacked kinds (at least 2 is used).
    pub depth: (usize, usize),
}

impl Default for DimsRanges {
    fn default() -> Self {
        Self {
            n: (4, 32),
            d: (8, 64),
            heads: vec![1, 2, 4, 8],
            depth: (2, 6),
        }
    }
}

impl DimsRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("n", self.n), ("d", self.d), ("depth", self.depth)] {
            if lo == 0 || lo > hi {
                return Err(Error::invalid(format!("range {name} = [{lo}, {hi}] is empty or starts at 0")));
            }
        }
        if self.n.1 > 256 || self.d.1 > 256 {
            return Err(Error::invalid("theory checks are limited to N, d ≤ 256"));
        }
        if self.heads.is_empty() || self.heads.contains(&0) {
            return Err(Error::invalid("head counts must be a nonempty list of positive integers"));
        }
        Ok(())
    }
}

/// One attention module, optionally augmented with parallel shortcuts.
#[derive(Clone, Debug, PartialEq)]
pub struct MsaLayer {
    pub attn: AttentionWeights<Array2<f64>>,
    pub shortcuts: Vec<ShortcutWeights<Array2<f64>>>,
    pub shortcut_activation: Activation,
}

/// One feed-forward module.
#[derive(Clone, Debug, PartialEq)]
pub enum MlpLayer {
    Plain {
        w1: Array2<f64>,
        w2: Array2<f64>,
        activation: Activation,
    },
    Siaf {
        branches: Vec<SiafBranchWeights<Array2<f64>>>,
        activations: Vec<Activation>,
        w2: Array2<f64>,
    },
}

/// The matrices one check needs. Fields a kind does not use stay empty.
/// Spectral constants are measured by the check itself, on the attention
/// matrices the forward pass actually produces.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialInstance {
    pub kind: BoundKind,
    pub seed: u64,
    pub dims: Dims,
    /// The input `Z` (or `H` for the lemma-level kinds).
    pub z: Array2<f64>,
    /// Second operand `B` of the convex-combination kind.
    pub other: Option<Array2<f64>>,
    pub alphas: [f64; 2],
    /// `W` for the weight lemma, `Θ` for the single-branch noise kinds.
    pub weight: Option<Array2<f64>>,
    pub activation: Activation,
    pub attention: Option<Array2<f64>>,
    pub blocks: Vec<Array2<f64>>,
    pub msa: Vec<MsaLayer>,
    pub mlp: Vec<MlpLayer>,
    pub noise: Option<Array2<f64>>,
    /// The scalar `L` multiplying the linear branch.
    pub gain: f64,
}

impl TrialInstance {
    fn empty(kind: BoundKind, dims: Dims, seed: u64, z: Array2<f64>) -> Self {
        Self {
            kind,
            seed,
            dims,
            z,
            other: None,
            alphas: [1.0, 1.0],
            weight: None,
            activation: Activation::Identity,
            attention: None,
            blocks: Vec::new(),
            msa: Vec::new(),
            mlp: Vec::new(),
            noise: None,
            gain: 1.0,
        }
    }
}

fn pick_activation(rng: &mut SeededRng) -> Activation {
    Activation::ALL[rng.random_range(0..Activation::ALL.len())]
}

fn weight(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    gaussian(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

/// Gaussian noise with column means removed.
pub(crate) fn zero_mean_noise(rng: &mut SeededRng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    let e: Array2<f64> = gaussian(rng, n, d, scale);
    let mean = e.mean_axis(Axis(0)).expect("nonempty");
    e - &mean.insert_axis(Axis(0))
}

pub(crate) fn attention_weights(rng: &mut SeededRng, d: usize, heads: usize) -> AttentionWeights<Array2<f64>> {
    let dh = d / heads;
    let mut per_head = || (0..heads).map(|_| weight(rng, d, dh)).collect::<Vec<_>>();
    let wq = per_head();
    let wk = per_head();
    let wv = per_head();
    AttentionWeights {
        wq,
        wk,
        wv,
        wo: weight(rng, d, d),
    }
}

fn shortcuts(rng: &mut SeededRng, d: usize) -> Vec<ShortcutWeights<Array2<f64>>> {
    let t = rng.random_range(1..=3);
    (0..t)
        .map(|_| {
            let r = [1usize, 2, 4][rng.random_range(0..3)];
            if r == 1 {
                ShortcutWeights::Dense { theta: weight(rng, d, d) }
            } else {
                let k = (d / r).max(1);
                ShortcutWeights::Bottleneck {
                    w_down: weight(rng, d, k),
                    w_up: weight(rng, k, d),
                }
            }
        })
        .collect()
}

fn msa_layer(rng: &mut SeededRng, dims: &Dims, augmented: bool) -> MsaLayer {
    let attn = attention_weights(rng, dims.d, dims.heads);
    let (shortcuts, shortcut_activation) = if augmented {
        (shortcuts(rng, dims.d), pick_activation(rng))
    } else {
        (Vec::new(), Activation::Identity)
    };
    MsaLayer {
        attn,
        shortcuts,
        shortcut_activation,
    }
}

fn mlp_layer(rng: &mut SeededRng, d: usize, siaf: bool) -> MlpLayer {
    let d_ff = 2 * d;
    if siaf {
        let n = rng.random_range(1..=3);
        let branches = (0..n)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let a = sign * rng.random_range(0.5..1.5);
                let b: f64 = gaussian::<f64>(rng, 1, 1, 0.5)[[0, 0]];
                SiafBranchWeights {
                    w1: weight(rng, d, d_ff),
                    scale: Array2::from_elem((1, 1), a),
                    bias: Array2::from_elem((1, 1), b),
                }
            })
            .collect();
        let activations = (0..n).map(|_| pick_activation(rng)).collect();
        MlpLayer::Siaf {
            branches,
            activations,
            w2: weight(rng, d_ff, d),
        }
    } else {
        MlpLayer::Plain {
            w1: weight(rng, d, d_ff),
            w2: weight(rng, d_ff, d),
            activation: pick_activation(rng),
        }
    }
}

/// Deterministic instance for `(kind, dims, seed)`.
pub fn sample_instance(kind: BoundKind, dims: &Dims, seed: u64) -> Result<TrialInstance> {
    dims.validate(kind)?;
    let mut rng = seeded(seed);
    let (n, d) = (dims.n, dims.d);
    let z: Array2<f64> = gaussian(&mut rng, n, d, 1.0);
    let mut inst = TrialInstance::empty(kind, *dims, seed, z);
    let log_uniform = |rng: &mut SeededRng, lo: f64, hi: f64| rng.random_range(lo.ln()..hi.ln()).exp();
    match kind {
        BoundKind::Lemma1Weight => {
            let m = rng.random_range(1..=2 * d);
            inst.weight = Some(weight(&mut rng, d, m));
        }
        BoundKind::Lemma1Activation => {
            inst.activation = pick_activation(&mut rng);
            let scale = log_uniform(&mut rng, 0.1, 5.0);
            inst.z *= scale;
        }
        BoundKind::Lemma1Convex => {
            inst.other = Some(gaussian(&mut rng, n, d, 1.0));
            inst.alphas = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
        }
        BoundKind::Lemma1Attention => {
            let logit_scale = rng.random_range(0.0..4.0);
            let logits: Array2<f64> = gaussian(&mut rng, n, n, logit_scale);
            inst.attention = Some(softmax_rows(logits.view()));
        }
        BoundKind::Lemma2ConcatEq => {
            let w = d / dims.heads;
            inst.blocks = (0..dims.heads).map(|_| gaussian(&mut rng, n, w, 1.0)).collect();
        }
        BoundKind::Thm1Singlehead | BoundKind::Thm2Msa | BoundKind::Thm2MsaStack => {
            inst.msa = (0..dims.depth).map(|_| msa_layer(&mut rng, dims, false)).collect();
        }
        BoundKind::Thm4Augmsa | BoundKind::Thm4AugmsaStack => {
            inst.msa = (0..dims.depth).map(|_| msa_layer(&mut rng, dims, true)).collect();
        }
        BoundKind::Thm3Mlp | BoundKind::Thm3MlpStack => {
            inst.mlp = (0..dims.depth).map(|_| mlp_layer(&mut rng, d, false)).collect();
        }
        BoundKind::Thm7Siaf | BoundKind::Thm7SiafStack => {
            inst.mlp = (0..dims.depth).map(|_| mlp_layer(&mut rng, d, true)).collect();
        }
        BoundKind::Thm8CombinedVanilla | BoundKind::Thm9CombinedPangu => {
            let pangu = kind == BoundKind::Thm9CombinedPangu;
            let p = dims.depth.div_ceil(2);
            inst.msa = (0..p).map(|_| msa_layer(&mut rng, dims, pangu)).collect();
            inst.mlp = (p..dims.depth).map(|_| mlp_layer(&mut rng, d, pangu)).collect();
        }
        BoundKind::NoiseLemma3Msa | BoundKind::NoiseThm6Augmsa => {
            let augmented = kind == BoundKind::NoiseThm6Augmsa;
            inst.msa = vec![msa_layer(&mut rng, dims, augmented)];
            let scale = log_uniform(&mut rng, 0.01, 1.0);
            inst.noise = Some(zero_mean_noise(&mut rng, n, d, scale));
        }
        BoundKind::NoiseLemma4Linear => {
            inst.weight = Some(weight(&mut rng, d, d));
            inst.gain = rng.random_range(0.5..2.0);
            let scale = log_uniform(&mut rng, 0.01, 1.0);
            inst.noise = Some(zero_mean_noise(&mut rng, n, d, scale));
        }
        BoundKind::NoiseThm5NonlinearStrict => {
            // ZΘ has entries of both signs and the noise is large enough to
            // move some of them across the kink.
            inst.activation = Activation::Relu;
            inst.weight = Some(weight(&mut rng, d, d));
            let scale = rng.random_range(0.1..1.0);
            inst.noise = Some(zero_mean_noise(&mut rng, n, d, scale));
        }
        BoundKind::NoiseDiversityTriangle => {
            let scale = log_uniform(&mut rng, 0.01, 10.0);
            inst.noise = Some(zero_mean_noise(&mut rng, n, d, scale));
        }
    }
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_give_identical_instances() {
        for kind in BoundKind::ALL {
            let dims = Dims::sample(kind, &DimsRanges::default(), 11).unwrap();
            let a = sample_instance(kind, &dims, 99).unwrap();
            let b = sample_instance(kind, &dims, 99).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn per_head_value_weights_have_head_width() {
        let dims = Dims { n: 8, d: 16, heads: 4, depth: 1 };
        let inst = sample_instance(BoundKind::Thm2Msa, &dims, 1).unwrap();
        let attn = &inst.msa[0].attn;
        assert_eq!(attn.wv.len(), 4);
        for w in &attn.wv {
            assert_eq!(w.dim(), (16, 4));
        }
    }

    #[test]
    fn noise_has_zero_column_means() {
        let dims = Dims { n: 12, d: 9, heads: 1, depth: 1 };
        let inst = sample_instance(BoundKind::NoiseDiversityTriangle, &dims, 3).unwrap();
        let means = inst.noise.unwrap().mean_axis(Axis(0)).unwrap();
        assert!(means.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let bad_heads = Dims { n: 8, d: 10, heads: 4, depth: 1 };
        assert!(sample_instance(BoundKind::Thm2Msa, &bad_heads, 0).is_err());
        let multihead_mlp = Dims { n: 8, d: 16, heads: 2, depth: 1 };
        assert!(sample_instance(BoundKind::Thm3Mlp, &multihead_mlp, 0).is_err());
        let shallow = Dims { n: 8, d: 16, heads: 2, depth: 1 };
        assert!(sample_instance(BoundKind::Thm8CombinedVanilla, &shallow, 0).is_err());
    }

    #[test]
    fn sampled_dims_respect_ranges() {
        let ranges = DimsRanges::default();
        for seed in 0..200 {
            for kind in BoundKind::ALL {
                let dims = Dims::sample(kind, &ranges, seed).unwrap();
                dims.validate(kind).unwrap();
                assert!((4..=32).contains(&dims.n));
                assert!((8..=64).contains(&dims.d));
                assert!([1, 2, 4, 8].contains(&dims.heads));
            }
        }
    }
}
