use super::instance::{sample_instance, Dims, DimsRanges};
use super::{check_inequality, BoundCheck, BoundKind};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::{attention_contraction, sinkhorn, softmax_rows, PowerConfig};
use crate::rng::{derive_seed, gaussian, seeded};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-kind aggregate over a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: BoundKind,
    pub trials: usize,
    pub passed: usize,
    pub failed: usize,
    pub inconclusive: usize,
    /// Trials where some spectral constant needed the dense eigensolver.
    pub dense_fallbacks: usize,
    /// Smallest `slack / max(1, |rhs|)` over conclusive trials.
    pub min_relative_slack: Option<f64>,
    /// Seed of the trial attaining `min_relative_slack`.
    pub worst_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub base_seed: u64,
    pub trials_per_kind: usize,
    pub summaries: Vec<KindSummary>,
    /// Every check, ordered by kind then seed.
    #[serde(skip)]
    pub checks: Vec<BoundCheck>,
}

impl TheoryReport {
    pub fn failures(&self) -> usize {
        self.summaries.iter().map(|s| s.failed).sum()
    }

    pub fn inconclusive(&self) -> usize {
        self.summaries.iter().map(|s| s.inconclusive).sum()
    }

    pub fn all_passed(&self) -> bool {
        self.failures() == 0 && self.inconclusive() == 0
    }

    /// The failing or inconclusive check with the smallest relative slack.
    pub fn worst_failure(&self) -> Option<&BoundCheck> {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .min_by(|a, b| a.relative_slack().total_cmp(&b.relative_slack()))
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `checks.jsonl` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("checks.jsonl"), self.to_jsonl()?.as_bytes())?;
        let summary = serde_json::to_vec_pretty(self)?;
        write_atomic(&dir.join("summary.json"), &summary)
    }
}

/// Seed of trial `trial` of `kind`.
pub fn trial_seed(base_seed: u64, kind: BoundKind, trial: usize) -> u64 {
    let k = BoundKind::ALL.iter().position(|&x| x == kind).expect("listed") as u64;
    derive_seed(derive_seed(base_seed, k), trial as u64)
}

fn run_trial(kind: BoundKind, seed: u64, ranges: &DimsRanges) -> Result<BoundCheck> {
    let dims = Dims::sample(kind, ranges, seed)?;
    let inst = sample_instance(kind, &dims, seed)?;
    check_inequality(kind, &inst)
}

fn summarize(kind: BoundKind, checks: &[BoundCheck]) -> KindSummary {
    let conclusive = checks.iter().filter(|c| !c.inconclusive);
    let worst = conclusive.min_by(|a, b| a.relative_slack().total_cmp(&b.relative_slack()));
    KindSummary {
        kind,
        trials: checks.len(),
        passed: checks.iter().filter(|c| c.pass).count(),
        failed: checks.iter().filter(|c| !c.pass && !c.inconclusive).count(),
        inconclusive: checks.iter().filter(|c| c.inconclusive).count(),
        dense_fallbacks: checks.iter().filter(|c| c.aux.contains_key("dense_fallbacks")).count(),
        min_relative_slack: worst.map(|c| c.relative_slack()),
        worst_seed: worst.map(|c| c.seed),
    }
}

/// Runs `trials` randomized checks of every kind in `kinds` on `workers`
/// threads. The report does not depend on `workers`.
pub fn run_suite(
    kinds: &[BoundKind],
    trials: usize,
    base_seed: u64,
    ranges: &DimsRanges,
    workers: usize,
) -> Result<TheoryReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    ranges.validate()?;
    let mut kinds = kinds.to_vec();
    kinds.sort();
    kinds.dedup();
    let jobs: Vec<(BoundKind, u64)> = kinds
        .iter()
        .flat_map(|&k| (0..trials).map(move |t| (k, trial_seed(base_seed, k, t))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let mut checks = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, seed)| run_trial(k, seed, ranges))
            .collect::<Result<Vec<_>>>()
    })?;
    checks.sort_by_key(|c| (c.kind, c.seed));
    let summaries = kinds
        .iter()
        .map(|&k| {
            let start = checks.partition_point(|c| c.kind < k);
            let end = checks.partition_point(|c| c.kind <= k);
            summarize(k, &checks[start..end])
        })
        .collect();
    Ok(TheoryReport {
        base_seed,
        trials_per_kind: trials,
        summaries,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerronFrobeniusReport {
    pub trials: usize,
    pub max_lambda: f64,
    pub all_below_one: bool,
    /// Worst row or column sum deviation from 1 after projection.
    pub max_marginal_error: f64,
}

/// Samples positive attention matrices, projects them to doubly stochastic
/// with 50 Sinkhorn iterations and records the largest contraction
/// constant seen.
pub fn perron_frobenius_demo(trials: usize, n_range: (usize, usize), seed: u64) -> Result<PerronFrobeniusReport> {
    if trials == 0 || n_range.0 < 2 || n_range.0 > n_range.1 {
        return Err(Error::invalid("need at least one trial and 2 ≤ n_lo ≤ n_hi"));
    }
    let power = PowerConfig::default();
    let mut max_lambda = 0.0f64;
    let mut max_marginal_error = 0.0f64;
    for t in 0..trials {
        let mut rng = seeded(derive_seed(seed, t as u64));
        let n = rng.random_range(n_range.0..=n_range.1);
        // Beyond a logit scale of about 1.5, 50 Sinkhorn passes no longer reach
        // 1e-6 column accuracy.
        let logit_scale = rng.random_range(0.1..1.5);
        let logits = gaussian::<f64>(&mut rng, n, n, logit_scale);
        let a = sinkhorn(softmax_rows(logits.view()).view(), 50);
        for axis in [0, 1] {
            let sums = a.sum_axis(ndarray::Axis(axis));
            max_marginal_error = sums.iter().fold(max_marginal_error, |m, s| m.max((s - 1.0).abs()));
        }
        max_lambda = max_lambda.max(attention_contraction(a.view(), &power)?.lambda_max);
    }
    Ok(PerronFrobeniusReport {
        trials,
        max_lambda,
        all_below_one: max_lambda < 1.0,
        max_marginal_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_kind_list_gives_empty_report() {
        let r = run_suite(&[], 3, 0, &DimsRanges::default(), 1).unwrap();
        assert!(r.checks.is_empty() && r.summaries.is_empty());
        assert!(r.all_passed());
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_suite(&BoundKind::ALL, 0, 0, &DimsRanges::default(), 1).is_err());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let kinds = [BoundKind::Thm2Msa, BoundKind::NoiseLemma3Msa];
        let a = run_suite(&kinds, 6, 3, &DimsRanges::default(), 1).unwrap();
        let b = run_suite(&kinds, 6, 3, &DimsRanges::default(), 3).unwrap();
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        assert_eq!(a.checks.len(), 12);
    }

    #[test]
    fn sinkhorn_attention_contracts() {
        let r = perron_frobenius_demo(50, (4, 16), 1).unwrap();
        assert!(r.all_below_one);
        assert!(r.max_marginal_error < 1e-6);
    }
}
