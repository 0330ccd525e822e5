use ndarray::Array2;
use rand::Rng;
use siafnet::analysis::{
    capture_features, effective_dimension_profile, pca_export, saliency, target_log_prob, CaptureOptions,
};
use siafnet::linalg::{effective_dimension, EffectiveDim};
use siafnet::model::{Checkpoint, FfnWeights, Model, ModelConfig, ShortcutWeights};
use siafnet::ops::{Backend, Eager};
use siafnet::rng::seeded;
use std::path::Path;

fn cfg() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 3,
        d_ff: 64,
        reduction_r: 8,
        max_seq_len: 64,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

fn batch(seed: u64, count: usize, len: usize) -> Vec<Vec<usize>> {
    let mut rng = seeded(seed);
    (0..count).map(|_| (0..len).map(|_| rng.random_range(0..259)).collect()).collect()
}

#[test]
fn one_record_per_layer_with_bounded_rank() {
    let model = Model::<f64>::new(cfg(), 1).unwrap();
    let opts = CaptureOptions::default();
    let records = capture_features(&model, &batch(2, 1, 10), &opts).unwrap();
    assert_eq!(records.len(), 3);
    for r in &records {
        assert_eq!(r.features.dim(), (9, 32));
        assert_eq!(r.tokens.len(), 9);
        let rank = effective_dimension(r.features.view(), 1.0).unwrap().count();
        assert!(rank <= 9usize.min(32));
        assert!((0.0..=1.0).contains(&r.pca.explained));
    }
}

#[test]
fn fresh_model_profile_lies_in_range() {
    let model = Model::<f64>::new(cfg(), 3).unwrap();
    let profile = effective_dimension_profile(&model, &batch(4, 6, 40), &CaptureOptions::default()).unwrap();
    assert_eq!(profile.rows.len(), 3);
    for r in &profile.rows {
        assert!((1..=32).contains(&r.d_eps), "{r:?}");
        assert!(!r.degenerate);
    }
    assert_eq!(profile.to_csv().lines().next(), Some("layer,d_eps"));
}

/// Blocks reduced to the identity and embeddings that are multiples of one
/// vector give rank-one features at every layer.
#[test]
fn rank_one_checkpoint_reports_one_everywhere() {
    let mut model = Model::<f64>::new(cfg(), 5).unwrap();
    let u: Vec<f64> = (0..32).map(|j| (j as f64 * 0.37).sin()).collect();
    for (t, mut row) in model.weights.tok_emb.rows_mut().into_iter().enumerate() {
        let c = 0.5 + t as f64 / 100.0;
        for (x, &uj) in row.iter_mut().zip(&u) {
            *x = c * uj;
        }
    }
    for layer in &mut model.weights.layers {
        layer.attn.wo.fill(0.0);
        for sc in &mut layer.shortcuts {
            if let ShortcutWeights::Bottleneck { w_up, .. } = sc {
                w_up.fill(0.0);
            }
        }
        if let FfnWeights::Siaf { w2, .. } = &mut layer.ffn {
            w2.fill(0.0);
        }
    }
    let profile = effective_dimension_profile(&model, &batch(6, 4, 20), &CaptureOptions::default()).unwrap();
    assert!(profile.rows.iter().all(|r| r.d_eps == 1), "{profile:?}");
}

#[test]
fn profile_ignores_sequence_order() {
    let model = Model::<f64>::new(cfg(), 7).unwrap();
    let mut b = batch(8, 5, 24);
    let opts = CaptureOptions::default();
    let a = effective_dimension_profile(&model, &b, &opts).unwrap();
    b.reverse();
    assert_eq!(effective_dimension_profile(&model, &b, &opts).unwrap(), a);
}

#[test]
fn full_rank_pca_export_explains_everything() {
    let model = Model::<f64>::new(cfg(), 9).unwrap();
    let records = capture_features(&model, &batch(10, 4, 16), &CaptureOptions::default()).unwrap();
    let exports = pca_export(&records, 32).unwrap();
    for e in &exports {
        assert!((e.explained - 1.0).abs() < 1e-9, "layer {}: {}", e.layer, e.explained);
    }
    let three = pca_export(&records, 3).unwrap();
    assert_eq!(three, pca_export(&records, 3).unwrap());
    for e in &three {
        assert_eq!(e.coordinates.len(), 60);
        assert!(e.coordinates.iter().all(|r| r.len() == 3));
        assert!(e.highlight_tokens.len() <= 5);
        let flagged = e.highlighted.iter().filter(|&&h| h).count();
        let expected = e.tokens.iter().filter(|t| e.highlight_tokens.contains(t)).count();
        assert_eq!(flagged, expected);
    }
    assert!(pca_export(&records, 33).is_err());
}

#[test]
fn saliency_ranks_channels_by_their_effect() {
    let mut agree = 0;
    let probes = 50;
    for p in 0..probes {
        let model = Model::<f64>::new(cfg(), 100 + p).unwrap();
        let tokens = &batch(200 + p, 1, 12)[0];
        let target = 3 + (p as usize % 8);
        let map = saliency(&model, tokens, target).unwrap();
        let emb = Eager.gather_rows(&model.weights.tok_emb, tokens);
        let base = target_log_prob(&model, &emb, target, map.target_token).unwrap();
        let (mut hi, mut lo) = ((0, 0), (0, 0));
        for r in 0..=target {
            for c in 0..32 {
                if map.values[[r, c]] > map.values[hi] {
                    hi = (r, c);
                }
                if map.values[[r, c]] < map.values[lo] {
                    lo = (r, c);
                }
            }
        }
        let effect = |at: (usize, usize)| {
            let mut e = emb.clone();
            e[at] = 0.0;
            (target_log_prob(&model, &e, target, map.target_token).unwrap() - base).abs()
        };
        if effect(hi) > effect(lo) {
            agree += 1;
        }
    }
    assert!(agree as f64 >= 0.8 * probes as f64, "{agree}/{probes}");
}

#[test]
fn saliency_map_is_nonnegative_normalized_and_causal() {
    let model = Model::<f64>::new(cfg(), 11).unwrap();
    let tokens = &batch(12, 1, 20)[0];
    for target in [0, 7, 18] {
        let map = saliency(&model, tokens, target).unwrap();
        assert!(map.values.iter().all(|&v| v >= 0.0));
        assert_eq!(map.values.iter().copied().fold(0.0, f64::max), 1.0);
        assert!(map.values.rows().into_iter().skip(target + 1).all(|r| r.iter().all(|&v| v == 0.0)));
    }
}

fn checksums(dir: &Path) -> Vec<(String, u32)> {
    let mut out: Vec<(String, u32)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), crc32fast::hash(&std::fs::read(e.path()).unwrap()))
        })
        .collect();
    out.sort();
    out
}

#[test]
fn analysis_leaves_the_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(cfg(), 13).unwrap();
    Checkpoint::new(model.config.clone(), model.weights.clone())
        .save(dir.path())
        .unwrap();
    let before = checksums(dir.path());
    let loaded = Model::from_checkpoint(Checkpoint::<f64>::load(dir.path()).unwrap()).unwrap();
    let b = batch(14, 3, 16);
    let records = capture_features(&loaded, &b, &CaptureOptions::default()).unwrap();
    pca_export(&records, 3).unwrap();
    effective_dimension_profile(&loaded, &b, &CaptureOptions::default()).unwrap();
    saliency(&loaded, &b[0], 5).unwrap();
    assert_eq!(checksums(dir.path()), before);
    let reloaded = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(reloaded.weights, model.weights);
}

#[test]
fn zero_variance_layers_are_flagged() {
    let mut model = Model::<f64>::new(cfg(), 15).unwrap();
    model.weights.tok_emb.fill(0.25);
    let profile = effective_dimension_profile(&model, &batch(16, 2, 12), &CaptureOptions::default()).unwrap();
    // identical inputs at every position stay identical through every layer
    assert_eq!(profile.degenerate_layers(), vec![0, 1, 2]);
    let f = Array2::<f64>::from_elem((4, 3), 2.0);
    assert_eq!(effective_dimension(f.view(), 0.8).unwrap(), EffectiveDim::NoVariance);
}
