use super::features::AnalysisRecord;
use crate::error::{Error, Result};
use crate::io::write_json_atomic;
use crate::linalg::pca_top_k;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Number of most frequent tokens tagged for highlighting.
const HIGHLIGHT_COUNT: usize = 5;

/// Contents of `pca_layer<l>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaLayerExport {
    pub layer: usize,
    pub k: usize,
    pub explained: f64,
    /// PCA statistics are pooled over every retained token of the batch.
    pub scope: String,
    pub tokens: Vec<usize>,
    /// One row of `k` coordinates per token.
    pub coordinates: Vec<Vec<f64>>,
    /// The most frequent token ids, most frequent first.
    pub highlight_tokens: Vec<usize>,
    /// Per row, whether its token is among `highlight_tokens`.
    pub highlighted: Vec<bool>,
}

impl PcaLayerExport {
    pub fn file_name(&self) -> String {
        format!("pca_layer{}.json", self.layer)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        write_json_atomic(&path, self)?;
        Ok(path)
    }
}

fn most_frequent(tokens: &[usize], count: usize) -> Vec<usize> {
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for &t in tokens {
        *freq.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(usize, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(t, _)| t).collect()
}

/// Top-`k` PCA coordinates of every record.
pub fn pca_export(records: &[AnalysisRecord], k: usize) -> Result<Vec<PcaLayerExport>> {
    records
        .iter()
        .map(|r| {
            let (n, d) = r.features.dim();
            if k == 0 || k > n.min(d) {
                return Err(Error::invalid(format!("k = {k} must lie in [1, min(N, d) = {}]", n.min(d))));
            }
            let pca = pca_top_k(r.features.view(), k)?;
            let highlight_tokens = most_frequent(&r.tokens, HIGHLIGHT_COUNT);
            Ok(PcaLayerExport {
                layer: r.layer,
                k,
                explained: pca.explained,
                scope: "batch".into(),
                highlighted: r.tokens.iter().map(|t| highlight_tokens.contains(t)).collect(),
                tokens: r.tokens.clone(),
                coordinates: pca.coordinates.rows().into_iter().map(|row| row.to_vec()).collect(),
                highlight_tokens,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_ties_break_by_token_id() {
        assert_eq!(most_frequent(&[3, 1, 3, 2, 1, 9], 2), vec![1, 3]);
        assert_eq!(most_frequent(&[7], 5), vec![7]);
    }
}
