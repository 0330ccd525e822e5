//! AdamW with decoupled weight decay.

use crate::model::Weights;
use crate::train::TrainConfig;
use crate::Scalar;
use ndarray::{Array2, Zip};

/// First and second moment estimates plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Weights<Array2<T>>,
    pub v: Weights<Array2<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(like: &Weights<Array2<T>>) -> Self {
        AdamState {
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// Weight decay applies to projection and embedding matrices, not to gains,
/// series-activation scales or biases.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !matches!(last, "attn_norm" | "ffn_norm" | "final_norm" | "scale" | "bias")
}

/// One AdamW update of a single tensor; `t` is the 1-based update count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    p: &mut Array2<T>,
    g: &Array2<T>,
    m: &mut Array2<T>,
    v: &mut Array2<T>,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let c1 = T::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(t as i32));
    let lr_t = T::of(lr);
    let shrink = T::of(1.0 - lr * if decay { cfg.weight_decay } else { 0.0 });
    let eps = T::of(cfg.adam_eps);
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
    });
}

/// Applies one AdamW update to every tensor at learning rate `lr`.
pub fn adamw_step<T: Scalar>(
    weights: &mut Weights<Array2<T>>,
    grads: &Weights<Array2<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step;
    let names = weights.names();
    let gs = grads.tensors();
    let ps = weights.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((p, g), m), v), name) in ps.into_iter().zip(gs).zip(ms).zip(vs).zip(&names) {
        adamw_update(p, g, m, v, t, lr, cfg, decays(name));
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Weights<Array2<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = T::of(max_norm / norm);
        for t in grads.tensors_mut() {
            t.mapv_inplace(|x| x * c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = arr2(&[[1.5f64, -2.0]]);
        let before = p.clone();
        let (mut m, mut v) = (Array2::zeros((1, 2)), Array2::zeros((1, 2)));
        for t in 1..=5 {
            adamw_update(&mut p, &Array2::zeros((1, 2)), &mut m, &mut v, t, 1e-2, &cfg(0.0), true);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let mut p = arr2(&[[2.0f64]]);
        let (mut m, mut v) = (Array2::zeros((1, 1)), Array2::zeros((1, 1)));
        let (lr, wd) = (1e-2, 0.5);
        for t in 1..=3 {
            adamw_update(&mut p, &Array2::zeros((1, 1)), &mut m, &mut v, t, lr, &cfg(wd), true);
        }
        assert!((p[[0, 0]] - 2.0 * (1.0 - lr * wd).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_recurrence() {
        let c = cfg(0.1);
        let lr = 1e-3;
        let gs = [0.5, -1.0, 2.0];
        let mut p = arr2(&[[1.0f64]]);
        let (mut m, mut v) = (Array2::zeros((1, 1)), Array2::zeros((1, 1)));
        let (mut hp, mut hm, mut hv) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in gs.iter().enumerate() {
            let t = i as i32 + 1;
            adamw_update(&mut p, &arr2(&[[g]]), &mut m, &mut v, t as u64, lr, &c, true);
            hm = 0.9 * hm + 0.1 * g;
            hv = 0.95 * hv + 0.05 * g * g;
            let mh = hm / (1.0 - 0.9f64.powi(t));
            let vh = hv / (1.0 - 0.95f64.powi(t));
            hp = hp * (1.0 - lr * 0.1) - lr * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[[0, 0]] - hp).abs() < 1e-15);
    }

    #[test]
    fn gains_and_series_parameters_do_not_decay() {
        assert!(decays("layers.0.attn.wq.1"));
        assert!(decays("tok_emb"));
        assert!(!decays("layers.1.ffn.branch.0.scale"));
        assert!(!decays("layers.1.ffn.branch.0.bias"));
        assert!(!decays("final_norm"));
    }
}
