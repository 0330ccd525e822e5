use ndarray::Array2;
use siafnet::linalg::symmetric_eigen;
use siafnet::rng::{gaussian, seeded};
use siafnet::theory::{
    check_inequality, collapse_demo, perron_frobenius_demo, run_suite, sample_instance, BoundKind, CollapseVariant,
    Dims, DimsRanges, EQUALITY_TOL, INEQUALITY_TOL,
};

#[test]
fn every_kind_passes_a_short_suite() {
    let report = run_suite(&BoundKind::ALL, 40, 123, &DimsRanges::default(), 1).unwrap();
    assert_eq!(report.checks.len(), 21 * 40);
    for s in &report.summaries {
        assert_eq!((s.failed, s.inconclusive), (0, 0), "{s:?}");
    }
    assert!(report.all_passed());
}

#[test]
fn pass_flag_follows_the_tolerance_rule() {
    let report = run_suite(&BoundKind::ALL, 10, 77, &DimsRanges::default(), 1).unwrap();
    for c in &report.checks {
        if c.inconclusive {
            continue;
        }
        let primary = if c.kind.is_equality() {
            (c.lhs - c.rhs).abs() <= EQUALITY_TOL * c.lhs.abs().max(c.rhs.abs())
        } else if c.strict {
            c.slack > 0.0
        } else {
            c.slack >= -INEQUALITY_TOL * c.rhs.abs().max(1.0)
        };
        // Side conditions can only turn a primary pass into a failure.
        assert!(!c.pass || primary, "{c:?}");
        assert_eq!(c.slack, c.rhs - c.lhs);
    }
}

#[test]
fn identical_inputs_give_identical_records() {
    for kind in BoundKind::ALL {
        let dims = Dims::sample(kind, &DimsRanges::default(), 5).unwrap();
        let a = check_inequality(kind, &sample_instance(kind, &dims, 5).unwrap()).unwrap();
        let b = check_inequality(kind, &sample_instance(kind, &dims, 5).unwrap()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn concatenation_identity_holds_to_equality_tolerance() {
    let report = run_suite(&[BoundKind::Lemma2ConcatEq], 200, 9, &DimsRanges::default(), 1).unwrap();
    for c in &report.checks {
        let rel = (c.lhs - c.rhs).abs() / c.lhs.abs().max(c.rhs.abs());
        assert!(rel <= 1e-10, "seed {}: {rel}", c.seed);
    }
}

#[test]
fn linear_noise_bound_is_tight_for_scaled_isometries() {
    let kind = BoundKind::NoiseLemma4Linear;
    for seed in 0..10 {
        let dims = Dims::sample(kind, &DimsRanges::default(), seed).unwrap();
        let mut inst = sample_instance(kind, &dims, seed).unwrap();
        let g: Array2<f64> = gaussian(&mut seeded(seed), dims.d, dims.d, 1.0);
        let q = symmetric_eigen((&g + &g.t()).view()).unwrap().vectors;
        inst.weight = Some(q * 1.7);
        let c = check_inequality(kind, &inst).unwrap();
        assert!(c.pass);
        assert!(c.slack.abs() <= 1e-10 * c.rhs, "seed {seed}: {c:?}");
    }
}

#[test]
fn sinkhorn_attention_has_contraction_below_one() {
    let pf = perron_frobenius_demo(300, (2, 32), 4).unwrap();
    assert!(pf.all_below_one && pf.max_lambda < 1.0);
    assert!(pf.max_marginal_error < 1e-6);
}

fn dims() -> Dims {
    Dims {
        n: 16,
        d: 32,
        heads: 4,
        depth: 20,
    }
}

#[test]
fn deep_attention_stack_collapses_under_its_bound() {
    for seed in 0..5 {
        let curve = collapse_demo(CollapseVariant::Vanilla, 20, &dims(), seed, None).unwrap();
        assert_eq!(curve.points.len(), 21);
        assert!(curve.final_ratio() < 1e-3, "seed {seed}: {}", curve.final_ratio());
        assert!(curve.dominated(1e-9));
        assert!(!curve.diverged);
    }
}

#[test]
fn augmented_stack_keeps_its_diversity() {
    for seed in 0..5 {
        let curve = collapse_demo(CollapseVariant::Augmsa, 20, &dims(), seed, None).unwrap();
        assert!(curve.final_ratio() >= 0.1, "seed {seed}: {}", curve.final_ratio());
        assert!(curve.dominated(1e-9));
    }
}

#[test]
fn feed_forward_stacks_respect_their_bounds() {
    for variant in [CollapseVariant::Mlp, CollapseVariant::Siaf, CollapseVariant::Combined] {
        for seed in 0..3 {
            let curve = collapse_demo(variant, 12, &dims(), seed, None).unwrap();
            assert!(curve.dominated(1e-9), "{variant} seed {seed}");
        }
    }
}
