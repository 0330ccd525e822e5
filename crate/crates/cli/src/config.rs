//! The run configuration shared by every subcommand.

use serde::{Deserialize, Serialize};
use siafnet::analysis::CaptureOptions;
use siafnet::model::ModelConfig;
use siafnet::theory::{BoundKind, CollapseVariant, DimsRanges};
use siafnet::train::TrainConfig;
use std::path::{Path, PathBuf};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; copied into `train.seed` when the config is resolved.
    pub seed: u64,
    /// Worker threads for the verifier; other subcommands are sequential.
    pub workers: usize,
    pub out: PathBuf,
    /// Training and analysis text; `None` selects the built-in synthetic text.
    pub corpus: Option<PathBuf>,
    /// Size of the synthetic text used when `corpus` is unset.
    pub synthetic_bytes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub verify: VerifyConfig,
    pub collapse: CollapseConfig,
    pub analysis: AnalysisConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            corpus: None,
            synthetic_bytes: 1 << 20,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            verify: VerifyConfig::default(),
            collapse: CollapseConfig::default(),
            analysis: AnalysisConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Kinds to check; empty means all.
    pub kinds: Vec<BoundKind>,
    pub trials: usize,
    pub ranges: DimsRanges,
    /// Sinkhorn-projected attention matrices checked for `λ_max < 1`; 0 skips.
    pub perron_frobenius_trials: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            trials: 1000,
            ranges: DimsRanges::default(),
            perron_frobenius_trials: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub variant: CollapseVariant,
    pub depth: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    /// Explicit weight multiplier; `None` calibrates each module.
    pub weight_scale: Option<f64>,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            variant: CollapseVariant::Vanilla,
            depth: 20,
            n: 16,
            d: 32,
            heads: 4,
            weight_scale: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisMode {
    Effdim,
    Pca,
    Saliency,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub checkpoint: Option<PathBuf>,
    /// Second checkpoint whose effective-dimension profile is tabulated
    /// next to the first.
    pub compare_checkpoint: Option<PathBuf>,
    pub mode: AnalysisMode,
    /// Sequences drawn from the validation split.
    pub samples: usize,
    pub seq_len: usize,
    pub capture: CaptureOptions,
    /// Saliency target position; `None` picks the second to last token.
    pub target_position: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            compare_checkpoint: None,
            mode: AnalysisMode::All,
            samples: 8,
            seq_len: 128,
            capture: CaptureOptions::default(),
            target_position: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Names from `vanilla`, `siaf`, `as`, `siaf+as`, `vanilla_deep`,
    /// `pangu_pi_wide`. Repeats are timed again.
    pub variants: Vec<String>,
    pub iterations: usize,
    pub warmup: usize,
    pub seq_len: usize,
    /// Adjust `d_ff` of the ablation rows to the vanilla parameter count.
    pub match_params: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: ["vanilla", "siaf", "as", "siaf+as", "vanilla_deep", "pangu_pi_wide"]
                .map(String::from)
                .to_vec(),
            iterations: 30,
            warmup: 3,
            seq_len: 64,
            match_params: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    /// Makes derived fields consistent and validates every section.
    pub fn resolve(mut self) -> Result<Self, String> {
        self.train.seed = self.seed;
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.verify.ranges.validate().map_err(|e| e.to_string())?;
        Ok(self)
    }

    pub fn write_resolved(&self) -> Result<PathBuf, String> {
        let path = self.out.join(RESOLVED_CONFIG);
        siafnet::io::write_json_atomic(&path, self).map_err(|e| e.to_string())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        for doc in [
            r#"{"sed": 1}"#,
            r#"{"model": {"d_modle": 64}}"#,
            r#"{"verify": {"ranges": {"m": [1, 2]}}}"#,
            r#"{"analysis": {"capture": {"eps": 0.5}}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "verify": {"trials": 3}}"#).unwrap();
        assert_eq!(cfg.verify.trials, 3);
        assert_eq!(cfg.verify.perron_frobenius_trials, 1000);
        assert_eq!(cfg.resolve().unwrap().train.seed, 9);
    }
}
