//! Diagnostics on trained or freshly initialized models: per-layer
//! effective dimension, PCA exports, input saliency and latency.

mod bench;
mod features;
mod pca_export;
mod saliency;

pub use bench::{ablation_variants, bench_csv, latency_bench, match_params, parity_pair, write_bench_csv, BenchRow, BenchVariant};
pub use features::{
    capture_features, compare_profiles, effective_dimension_profile, AnalysisRecord, CaptureOptions, EffDimProfile,
    EffDimRow,
};
pub use pca_export::{pca_export, PcaLayerExport};
pub use saliency::{saliency, target_log_prob, SaliencyMap};
