use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::{diversity, effective_dimension, frobenius, pca_top_k, EffectiveDim, PcaProjection};
use crate::model::Model;
use crate::Scalar;
use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureOptions {
    /// Leading tokens removed from every sequence before analysis.
    pub drop: usize,
    /// Variance fraction for the effective dimension.
    pub epsilon: f64,
    /// Number of principal components kept per record.
    pub pca_k: usize,
}

impl Default for CaptureOptions {
    fn default() -> Self {
        Self {
            drop: 1,
            epsilon: 0.8,
            pca_k: 3,
        }
    }
}

/// Features of one layer over a whole batch. PCA statistics are computed
/// over all retained tokens of the batch together.
#[derive(Clone, Debug)]
pub struct AnalysisRecord {
    pub layer: usize,
    pub features: Array2<f64>,
    pub tokens: Vec<usize>,
    pub diversity: f64,
    pub epsilon: f64,
    pub effective_dim: EffectiveDim,
    pub pca: PcaProjection,
}

/// Runs every sequence of `batch` through `model` and returns one record
/// per layer, with the first `opts.drop` tokens of each sequence removed.
pub fn capture_features<T: Scalar>(
    model: &Model<T>,
    batch: &[Vec<usize>],
    opts: &CaptureOptions,
) -> Result<Vec<AnalysisRecord>> {
    if batch.is_empty() {
        return Err(Error::invalid("analysis batch is empty"));
    }
    let mut per_layer: Vec<Vec<Array2<f64>>> = vec![Vec::new(); model.config.n_layers];
    let mut tokens = Vec::new();
    for seq in batch {
        if seq.len() <= opts.drop {
            return Err(Error::invalid(format!(
                "sequence of {} tokens leaves nothing after dropping {}",
                seq.len(),
                opts.drop
            )));
        }
        let out = model.forward(seq, true)?;
        for (layer, h) in out.hidden.expect("captured").into_iter().enumerate() {
            per_layer[layer].push(h.slice(ndarray::s![opts.drop.., ..]).mapv(|x| x.as_f64()));
        }
        tokens.extend_from_slice(&seq[opts.drop..]);
    }
    if tokens.len() < 2 {
        return Err(Error::invalid("need at least two retained tokens for PCA"));
    }
    per_layer
        .into_iter()
        .enumerate()
        .map(|(layer, parts)| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            let features = concatenate(Axis(0), &views).map_err(|e| Error::shape("capture_features", e.to_string()))?;
            let k = opts.pca_k.min(features.nrows()).min(features.ncols());
            Ok(AnalysisRecord {
                layer,
                diversity: diversity(features.view())?,
                epsilon: opts.epsilon,
                effective_dim: effective_dimension(features.view(), opts.epsilon)?,
                pca: pca_top_k(features.view(), k)?,
                tokens: tokens.clone(),
                features,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffDimRow {
    pub layer: usize,
    pub d_eps: usize,
    /// The layer's features have no variance above rounding level, so
    /// `d_eps` carries no information.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffDimProfile {
    pub epsilon: f64,
    pub rows: Vec<EffDimRow>,
}

/// Diversity this small is indistinguishable from rounding error in the
/// features themselves.
fn below_resolution(r: &AnalysisRecord) -> bool {
    let n = r.features.nrows() as f64;
    r.diversity <= n * f64::EPSILON * frobenius(r.features.view())
}

impl EffDimProfile {
    pub fn from_records(records: &[AnalysisRecord]) -> Self {
        Self {
            epsilon: records.first().map_or(0.8, |r| r.epsilon),
            rows: records
                .iter()
                .map(|r| EffDimRow {
                    layer: r.layer,
                    d_eps: r.effective_dim.count(),
                    degenerate: r.effective_dim == EffectiveDim::NoVariance || below_resolution(r),
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,d_eps\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.layer, r.d_eps));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn degenerate_layers(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.degenerate).map(|r| r.layer).collect()
    }
}

/// `d(ε)` per layer over `batch`.
pub fn effective_dimension_profile<T: Scalar>(
    model: &Model<T>,
    batch: &[Vec<usize>],
    opts: &CaptureOptions,
) -> Result<EffDimProfile> {
    Ok(EffDimProfile::from_records(&capture_features(model, batch, opts)?))
}

/// Side-by-side table `layer,<left>,<right>,difference` for two profiles;
/// layers present in only one profile are left blank in the other column.
pub fn compare_profiles(left_name: &str, left: &EffDimProfile, right_name: &str, right: &EffDimProfile) -> String {
    let layers = left.rows.len().max(right.rows.len());
    let mut out = format!("layer,{left_name},{right_name},difference\n");
    for l in 0..layers {
        let a = left.rows.get(l).map(|r| r.d_eps);
        let b = right.rows.get(l).map(|r| r.d_eps);
        let cell = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        let diff = match (a, b) {
            (Some(a), Some(b)) => (a as i64 - b as i64).to_string(),
            _ => String::new(),
        };
        out.push_str(&format!("{l},{},{},{diff}\n", cell(a), cell(b)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> Model<f64> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 3,
            d_ff: 32,
            reduction_r: 4,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn one_record_per_layer_with_dropped_rows() {
        let m = tiny();
        let seq: Vec<usize> = (0..10).map(|i| 40 + i).collect();
        let recs = capture_features(&m, &[seq], &CaptureOptions::default()).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.features.dim(), (9, 16));
            assert_eq!(r.tokens.len(), 9);
            assert!((0.0..=1.0).contains(&r.pca.explained));
            assert!((1..=9).contains(&r.effective_dim.count()));
        }
    }

    #[test]
    fn too_short_sequences_are_rejected() {
        let m = tiny();
        assert!(capture_features(&m, &[vec![5]], &CaptureOptions::default()).is_err());
        assert!(capture_features(&m, &[], &CaptureOptions::default()).is_err());
    }

    #[test]
    fn csv_and_comparison_layout() {
        let p = EffDimProfile {
            epsilon: 0.8,
            rows: vec![
                EffDimRow { layer: 0, d_eps: 5, degenerate: false },
                EffDimRow { layer: 1, d_eps: 3, degenerate: false },
            ],
        };
        assert_eq!(p.to_csv(), "layer,d_eps\n0,5\n1,3\n");
        let q = EffDimProfile { epsilon: 0.8, rows: vec![EffDimRow { layer: 0, d_eps: 4, degenerate: false }] };
        assert_eq!(compare_profiles("a", &p, "b", &q), "layer,a,b,difference\n0,5,4,1\n1,3,,\n");
    }
}
