use siafnet::analysis::{latency_bench, BenchVariant};
use siafnet::model::ModelConfig;

/// Two timings of the same configuration agree to within 20%.
#[test]
fn repeated_bench_medians_agree() {
    let variant = BenchVariant {
        name: "pangu_pi".into(),
        config: ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            max_seq_len: 64,
            ..ModelConfig::default()
        },
    };
    let variants = [variant.clone(), variant];
    let rows = latency_bench(&variants, 30, 5, 32, 0).unwrap();
    let (a, b) = (rows[0].median_ms_per_token, rows[1].median_ms_per_token);
    let spread = (a - b).abs() / a.min(b);
    assert!(spread <= 0.2, "medians {a} and {b} differ by {:.1}%", spread * 100.0);
}
