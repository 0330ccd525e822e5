//! Central-difference verification of tape gradients on a full model.

use crate::error::{Error, Result};
use crate::linalg::Activation;
use crate::model::{layers, ModelConfig, Weights};
use crate::ops::{Backend, Eager};
use crate::rng::seeded;
use crate::train::{loss_and_gradients, Batch};
use ndarray::Array2;
use rand::seq::index::sample;
use serde::Serialize;
use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Coordinates sampled per parameter group (all of them if fewer).
    pub samples_per_group: usize,
    /// Lower bound on the relative-error denominator.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            samples_per_group: 200,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupStats {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: BTreeMap<String, GroupStats>,
    pub max_rel_error: f64,
    /// Coordinates above tolerance: tensor name, flat index, relative error.
    pub failures: Vec<(String, usize, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Parameter group of a tensor: its name with numeric indices removed, so
/// for example all heads of all layers' query projections form one group.
pub fn group_of(name: &str) -> String {
    name.split('.')
        .filter(|part| part.parse::<usize>().is_err())
        .collect::<Vec<_>>()
        .join(".")
}

/// Eager evaluation that records the inputs of non-smooth activations.
struct Probe {
    log: RefCell<Vec<Array2<f64>>>,
}

impl Probe {
    fn record(&self, x: &Array2<f64>, act: Activation, affine: Option<(f64, f64)>) {
        if act.has_kink() {
            let pre = match affine {
                Some((a, b)) => x.mapv(|v| a * v + b),
                None => x.clone(),
            };
            self.log.borrow_mut().push(pre);
        }
    }
}

impl Backend<f64> for Probe {
    type M = Array2<f64>;

    fn constant(&self, value: Array2<f64>) -> Array2<f64> {
        value
    }
    fn dims(&self, m: &Array2<f64>) -> (usize, usize) {
        m.dim()
    }
    fn to_array(&self, m: &Array2<f64>) -> Array2<f64> {
        m.clone()
    }
    fn matmul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        Eager.matmul(a, b)
    }
    fn matmul_nt(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        Eager.matmul_nt(a, b)
    }
    fn add(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        Eager.add(a, b)
    }
    fn mul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        Eager.mul(a, b)
    }
    fn scale(&self, a: &Array2<f64>, c: f64) -> Array2<f64> {
        Eager.scale(a, c)
    }
    fn activation(&self, x: &Array2<f64>, act: Activation) -> Array2<f64> {
        self.record(x, act, None);
        Eager.activation(x, act)
    }
    fn affine_activation(&self, x: &Array2<f64>, act: Activation, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        self.record(x, act, Some((a[[0, 0]], b[[0, 0]])));
        Eager.affine_activation(x, act, a, b)
    }
    fn rms_norm(&self, x: &Array2<f64>, gain: &Array2<f64>, eps: f64) -> Array2<f64> {
        Eager.rms_norm(x, gain, eps)
    }
    fn rope(&self, x: &Array2<f64>, positions: &[usize], base: f64) -> Array2<f64> {
        Eager.rope(x, positions, base)
    }
    fn softmax_rows(&self, x: &Array2<f64>, causal: bool) -> Array2<f64> {
        Eager.softmax_rows(x, causal)
    }
    fn slice_rows(&self, x: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
        Eager.slice_rows(x, start, len)
    }
    fn slice_cols(&self, x: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
        Eager.slice_cols(x, start, len)
    }
    fn concat_rows(&self, parts: &[Array2<f64>]) -> Array2<f64> {
        Eager.concat_rows(parts)
    }
    fn concat_cols(&self, parts: &[Array2<f64>]) -> Array2<f64> {
        Eager.concat_cols(parts)
    }
    fn gather_rows(&self, table: &Array2<f64>, ids: &[usize]) -> Array2<f64> {
        Eager.gather_rows(table, ids)
    }
    fn cross_entropy(&self, logits: &Array2<f64>, targets: &[usize]) -> Array2<f64> {
        Eager.cross_entropy(logits, targets)
    }
    fn log_prob(&self, logits: &Array2<f64>, row: usize, target: usize) -> Array2<f64> {
        Eager.log_prob(logits, row, target)
    }
}

fn probed_loss(cfg: &ModelConfig, w: &Weights<Array2<f64>>, batch: &Batch) -> (f64, Vec<Array2<f64>>) {
    let probe = Probe {
        log: RefCell::new(Vec::new()),
    };
    let (logits, _) = layers::forward(&probe, w, cfg, &batch.inputs, batch.seq_len, false);
    let loss = probe.cross_entropy(&logits, &batch.targets)[[0, 0]];
    (loss, probe.log.into_inner())
}

/// True when the coordinate moves a non-smooth pre-activation that lies
/// within `10·h` of the kink, or pushes one across it.
fn near_kink(base: &[Array2<f64>], plus: &[Array2<f64>], minus: &[Array2<f64>], h: f64) -> bool {
    base.iter().zip(plus).zip(minus).any(|((x0, xp), xm)| {
        x0.iter()
            .zip(xp)
            .zip(xm)
            .any(|((&x0, &xp), &xm)| xp != xm && (x0.abs() < 10.0 * h || (xp > 0.0) != (xm > 0.0)))
    })
}

/// Compares backward-pass gradients of the mean cross-entropy of `batch`
/// with central differences on a random subsample of coordinates.
pub fn grad_check(
    cfg: &ModelConfig,
    weights: &Weights<Array2<f64>>,
    batch: &Batch,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(check.h > 0.0) || !(check.tol > 0.0) || check.samples_per_group == 0 {
        return Err(Error::invalid("grad_check needs h > 0, tol > 0 and a positive sample count"));
    }
    let (_, analytic) = loss_and_gradients(cfg, weights, batch)?;
    let (_, base_log) = probed_loss(cfg, weights, batch);
    let names = weights.names();
    let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let grads: Vec<&Array2<f64>> = analytic.tensors();

    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, name) in names.iter().enumerate() {
        let g = groups.entry(group_of(name)).or_default();
        g.extend((0..sizes[t]).map(|i| (t, i)));
    }

    let mut rng = seeded(check.seed);
    let mut work = weights.clone();
    let mut report = GradCheckReport {
        groups: BTreeMap::new(),
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for (group, coords) in &groups {
        let chosen: Vec<(usize, usize)> = if coords.len() <= check.samples_per_group {
            coords.clone()
        } else {
            sample(&mut rng, coords.len(), check.samples_per_group)
                .into_iter()
                .map(|k| coords[k])
                .collect()
        };
        let mut stats = GroupStats {
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
            mean_rel_error: 0.0,
            worst: None,
        };
        let mut sum = 0.0;
        for (t, i) in chosen {
            let original = work.tensors()[t].as_slice().expect("standard layout")[i];
            let set = |w: &mut Weights<Array2<f64>>, v: f64| {
                w.tensors_mut()[t].as_slice_mut().expect("standard layout")[i] = v;
            };
            set(&mut work, original + check.h);
            let (lp, log_p) = probed_loss(cfg, &work, batch);
            set(&mut work, original - check.h);
            let (lm, log_m) = probed_loss(cfg, &work, batch);
            set(&mut work, original);
            if near_kink(&base_log, &log_p, &log_m, check.h) {
                stats.excluded += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * check.h);
            let exact = grads[t].as_slice().expect("standard layout")[i];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(check.denom_floor);
            stats.checked += 1;
            sum += rel;
            if rel > stats.max_rel_error || stats.worst.is_none() {
                stats.max_rel_error = stats.max_rel_error.max(rel);
                stats.worst = Some((names[t].clone(), i));
            }
            if rel > check.tol {
                report.failures.push((names[t].clone(), i, rel));
            }
        }
        if stats.checked > 0 {
            stats.mean_rel_error = sum / stats.checked as f64;
        }
        report.max_rel_error = report.max_rel_error.max(stats.max_rel_error);
        report.groups.insert(group.clone(), stats);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockStyle, Model};

    #[test]
    fn groups_strip_indices() {
        assert_eq!(group_of("layers.3.attn.wq.1"), "layers.attn.wq");
        assert_eq!(group_of("layers.0.ffn.branch.1.scale"), "layers.ffn.branch.scale");
        assert_eq!(group_of("lm_head"), "lm_head");
    }

    #[test]
    fn kink_rule_excludes_nearby_coordinates() {
        let base = vec![Array2::from_elem((1, 2), 5e-5)];
        let moved = vec![Array2::from_elem((1, 2), 6e-5)];
        assert!(near_kink(&base, &moved, &base, 1e-5));
        let far = vec![Array2::from_elem((1, 2), 1.0)];
        let far_moved = vec![Array2::from_elem((1, 2), 1.0 + 1e-5)];
        assert!(!near_kink(&far, &far_moved, &far, 1e-5));
        assert!(!near_kink(&base, &base, &base, 1e-5));
    }

    #[test]
    fn small_relu_model_passes() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 24,
            vocab_size: 11,
            reduction_r: 4,
            base_activation: Activation::Relu,
            block_style: BlockStyle::PanguPi,
            init_std: 0.3,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg.clone(), 4).unwrap();
        let batch = Batch {
            inputs: vec![1, 5, 2, 9, 3, 3],
            targets: vec![5, 2, 9, 3, 3, 0],
            seq_len: 6,
        };
        let check = GradCheckConfig {
            samples_per_group: 40,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&cfg, &model.weights, &batch, &check).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.groups.values().all(|g| g.checked > 0));
    }
}
