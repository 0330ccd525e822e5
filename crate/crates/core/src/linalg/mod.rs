//! Numerical kernels behind every diversity statement: the rank-one subspace
//! distance, spectral constants, activation Lipschitz constants and
//! PCA-based effective dimension.

mod activation;
mod diversity;
mod eigen;
mod pca;
mod sinkhorn;
mod spectral;

pub use activation::{lipschitz_estimate, Activation, ActivationSpec, LIPSCHITZ_SAFETY};
pub use diversity::{
    diversity, diversity_oracle, ensure_finite, frobenius, projector, FeatureMatrix,
};
pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use pca::{covariance, effective_dimension, pca_top_k, EffectiveDim, PcaProjection};
pub use sinkhorn::{sinkhorn, softmax_rows};
pub use spectral::{
    attention_contraction, projected_gram_contraction, spectral_norm, PowerConfig,
    SpectralSummary,
};
