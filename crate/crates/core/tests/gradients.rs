use ndarray::{array, Array2};
use siafnet::autodiff::{grad_check, GradCheckConfig, Tape};
use siafnet::linalg::Activation;
use siafnet::model::{BlockStyle, ModelConfig, Weights};
use siafnet::ops::{Backend, Eager};
use siafnet::rng::{gaussian, seeded};
use siafnet::train::Batch;
use siafnet::Error;

#[test]
fn gradient_of_a_sum_is_all_ones() {
    let tape = Tape::<f64>::new();
    let z = tape.param(gaussian(&mut seeded(1), 5, 3, 1.0));
    let zero = tape.constant(Array2::zeros((5, 3)));
    let out = tape.add(&z, &zero);
    let g = tape.backward(out).unwrap();
    assert_eq!(g.get(z).unwrap(), &Array2::<f64>::ones((5, 3)));
}

#[test]
fn linear_map_gradient_is_exact() {
    let x: Array2<f64> = gaussian(&mut seeded(2), 4, 6, 1.0);
    let w: Array2<f64> = gaussian(&mut seeded(3), 6, 2, 1.0);
    let tape = Tape::<f64>::new();
    let wv = tape.param(w.clone());
    let out = tape.matmul(&tape.constant(x.clone()), &wv);
    let g = tape.backward(out).unwrap().get(wv).unwrap().clone();
    let h = 1e-3;
    for i in 0..6 {
        for j in 0..2 {
            let mut plus = w.clone();
            plus[[i, j]] += h;
            let mut minus = w.clone();
            minus[[i, j]] -= h;
            let fd = (x.dot(&plus).sum() - x.dot(&minus).sum()) / (2.0 * h);
            assert!((fd - g[[i, j]]).abs() <= 1e-9 * fd.abs().max(1.0));
        }
    }
}

#[test]
fn series_scale_and_bias_gradients_match_central_differences() {
    let x: Array2<f64> = gaussian(&mut seeded(4), 6, 5, 1.0);
    for act in [Activation::Gelu, Activation::Swish, Activation::Tanh] {
        let (a, b) = (0.7, -0.3);
        let tape = Tape::<f64>::new();
        let av = tape.param(array![[a]]);
        let bv = tape.param(array![[b]]);
        let out = tape.affine_activation(&tape.constant(x.clone()), act, &av, &bv);
        let g = tape.backward(out).unwrap();
        let f = |a: f64, b: f64| x.iter().map(|&v| act.apply(a * v + b)).sum::<f64>();
        let h = 1e-5;
        let fd_a = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
        let fd_b = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
        let ga = g.get(av).unwrap()[[0, 0]];
        let gb = g.get(bv).unwrap()[[0, 0]];
        assert!((ga - fd_a).abs() <= 1e-6 * fd_a.abs().max(1e-3), "{act:?}: {ga} vs {fd_a}");
        assert!((gb - fd_b).abs() <= 1e-6 * fd_b.abs().max(1e-3), "{act:?}: {gb} vs {fd_b}");
        // analytic form σ′(a·x + b)·x
        let direct: f64 = x.iter().map(|&v| act.derivative(a * v + b) * v).sum();
        assert!((ga - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }
}

#[test]
fn non_finite_gradient_names_the_operation() {
    let tape = Tape::<f64>::new();
    let x = tape.param(array![[1e300]]);
    let y = tape.mul(&x, &tape.constant(array![[1e300]]));
    let z = tape.mul(&y, &y);
    match tape.backward(z) {
        Err(Error::NonFiniteGradient { op }) => assert_eq!(op, "mul"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected a non-finite gradient"),
    }
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let logits: Array2<f64> = gaussian(&mut seeded(6), 4, 7, 2.0);
    let targets = [3, 0, 6, 2];
    let got = Eager.cross_entropy(&logits, &targets)[[0, 0]];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let mut z = 0.0;
        for c in 0..7 {
            z += logits[[r, c]].exp();
        }
        oracle += z.ln() - logits[[r, t]];
    }
    oracle /= 4.0;
    assert!((got - oracle).abs() <= 1e-12);
    let mut confident = Array2::<f64>::zeros((2, 5));
    confident[[0, 1]] = 100.0;
    confident[[1, 4]] = 100.0;
    assert!(Eager.cross_entropy(&confident, &[1, 4])[[0, 0]] < 1e-40);
}

#[test]
fn two_layer_model_passes_gradient_check() {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        siaf_n: 2,
        shortcut_t: 1,
        reduction_r: 8,
        d_ff: 64,
        vocab_size: 50,
        max_seq_len: 16,
        block_style: BlockStyle::PanguPi,
        init_std: 0.2,
        ..ModelConfig::default()
    };
    let mut weights = Weights::<Array2<f64>>::init(&cfg, 1);
    // perturb series parameters away from their a = 1, b = 0 initialization
    for (i, layer) in weights.layers.iter_mut().enumerate() {
        if let siafnet::model::FfnWeights::Siaf { branches, .. } = &mut layer.ffn {
            for (k, br) in branches.iter_mut().enumerate() {
                br.scale[[0, 0]] = 0.8 + 0.1 * (i + k) as f64;
                br.bias[[0, 0]] = 0.05 * (k as f64 - 0.5);
            }
        }
    }
    let inputs: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 50).collect();
    let targets: Vec<usize> = (0..16).map(|i| (i * 11 + 5) % 50).collect();
    let batch = Batch {
        inputs,
        targets,
        seq_len: 8,
    };
    let report = grad_check(&cfg, &weights, &batch, &GradCheckConfig::default()).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert!(report.max_rel_error < 1e-4);
    for name in ["branch.scale", "branch.bias", "shortcut.w_down", "shortcut.w_up"] {
        assert!(report.groups.keys().any(|g| g.contains(name)), "no group {name} in {:?}", report.groups.keys());
    }
}
