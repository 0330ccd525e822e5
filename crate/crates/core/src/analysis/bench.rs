use crate::error::{Error, Result};
use crate::model::{count_flops, param_count, BlockStyle, Model, ModelConfig};
use crate::rng::seeded;
use rand::Rng;
use std::path::Path;
use std::time::{Duration, Instant};

/// A sample shorter than this is too close to timer resolution, so the
/// forward pass is repeated inside each sample until it is exceeded.
const MIN_SAMPLE: Duration = Duration::from_millis(5);
/// Warmup continues past the requested iteration count until this much
/// time has passed, so caches and clock frequency settle.
const MIN_WARMUP: Duration = Duration::from_millis(100);

#[derive(Clone, Debug, PartialEq)]
pub struct BenchVariant {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub params: u64,
    pub flops: u64,
    pub median_ms_per_token: f64,
    pub p90_ms_per_token: f64,
    /// Forward passes per timed sample.
    pub reps: usize,
}

/// Sets `d_ff` so the parameter total is as close to `target` as the
/// integer width allows.
pub fn match_params(cfg: &mut ModelConfig, target: u64) {
    let probe = |f: usize| {
        let mut c = cfg.clone();
        c.d_ff = f;
        param_count(&c).total as i128
    };
    let (at1, at2) = (probe(1), probe(2));
    let per_unit = at2 - at1;
    let estimate = 1 + (target as i128 - at1).div_euclid(per_unit).max(0);
    let best = [estimate, estimate + 1]
        .into_iter()
        .filter(|&f| f >= 1)
        .min_by_key(|&f| (probe(f as usize) - target as i128).abs())
        .unwrap_or(1);
    cfg.d_ff = best as usize;
}

/// The four ablation rows: vanilla, SIAF only (`T = 0`), augmented shortcuts
/// only (`n = 1`), and both. With `match_budget` every pangu_pi row has its
/// `d_ff` adjusted to the vanilla parameter count.
pub fn ablation_variants(base: &ModelConfig, match_budget: bool) -> Vec<BenchVariant> {
    let vanilla = ModelConfig {
        block_style: BlockStyle::Vanilla,
        ..base.clone()
    };
    let pangu = ModelConfig {
        block_style: BlockStyle::PanguPi,
        siaf_activations: Vec::new(),
        ..base.clone()
    };
    let n = base.siaf_n.max(2);
    let t = base.shortcut_t.max(1);
    let mut out = vec![BenchVariant {
        name: "vanilla".into(),
        config: vanilla.clone(),
    }];
    for (name, siaf_n, shortcut_t) in [("siaf", n, 0), ("as", 1, t), ("siaf+as", n, t)] {
        let mut config = ModelConfig {
            siaf_n,
            shortcut_t,
            ..pangu.clone()
        };
        if match_budget {
            match_params(&mut config, param_count(&vanilla).total);
        }
        out.push(BenchVariant {
            name: name.into(),
            config,
        });
    }
    out
}

/// A deep vanilla stack with `2L` layers against a pangu_pi stack with `L`
/// layers whose `d_ff` is widened to the same parameter budget.
pub fn parity_pair(base: &ModelConfig) -> (BenchVariant, BenchVariant) {
    let deep = ModelConfig {
        block_style: BlockStyle::Vanilla,
        n_layers: 2 * base.n_layers.max(1),
        ..base.clone()
    };
    let mut wide = ModelConfig {
        block_style: BlockStyle::PanguPi,
        n_layers: base.n_layers.max(1),
        ..base.clone()
    };
    match_params(&mut wide, param_count(&deep).total);
    (
        BenchVariant {
            name: "vanilla_deep".into(),
            config: deep,
        },
        BenchVariant {
            name: "pangu_pi_wide".into(),
            config: wide,
        },
    )
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Wall-clock forward latency of each variant in `f32`, one sequence of
/// `seq_len` tokens per pass.
pub fn latency_bench(
    variants: &[BenchVariant],
    iterations: usize,
    warmup: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if iterations < 10 {
        return Err(Error::invalid(format!("latency_bench needs at least 10 iterations, got {iterations}")));
    }
    if variants.is_empty() || seq_len == 0 {
        return Err(Error::invalid("latency_bench needs at least one variant and seq_len > 0"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        v.config.validate()?;
        let model = Model::<f32>::new(v.config.clone(), seed)?;
        let mut rng = seeded(seed);
        let tokens: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..v.config.vocab_size)).collect();
        model.check_tokens(&tokens, seq_len)?;
        let warm = Instant::now();
        let mut done = 0;
        while done < warmup || warm.elapsed() < MIN_WARMUP {
            std::hint::black_box(model.forward(&tokens, false)?);
            done += 1;
        }
        let run = |reps: usize| -> Result<Duration> {
            let start = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(model.forward(&tokens, false)?);
            }
            Ok(start.elapsed())
        };
        let mut reps = 1;
        while run(reps)? < MIN_SAMPLE {
            reps *= 2;
        }
        let mut samples = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let ms = run(reps)?.as_secs_f64() * 1e3;
            samples.push(ms / (reps * seq_len) as f64);
        }
        samples.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            variant: v.name.clone(),
            params: param_count(&v.config).total,
            flops: count_flops(&v.config, seq_len).total,
            median_ms_per_token: quantile(&samples, 0.5),
            p90_ms_per_token: quantile(&samples, 0.9),
            reps,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("variant,median_ms_per_token,p90,flops,params\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{},{}\n",
            r.variant, r.median_ms_per_token, r.p90_ms_per_token, r.flops, r.params
        ));
    }
    s
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, bench_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            reduction_r: 32,
            max_seq_len: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn four_ablation_rows() {
        let v = ablation_variants(&small(), false);
        let names: Vec<_> = v.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["vanilla", "siaf", "as", "siaf+as"]);
        assert_eq!(v[1].config.effective_shortcut_t(), 0);
        assert_eq!(v[2].config.siaf_n, 1);
    }

    #[test]
    fn bottleneck_flops_difference() {
        let cfg = small();
        let v = ablation_variants(&cfg, false);
        let n = 16u64;
        let d = cfg.d_model as u64;
        let both = count_flops(&v[3].config, n as usize).total;
        let siaf = count_flops(&v[1].config, n as usize).total;
        assert_eq!(both - siaf, cfg.n_layers as u64 * n * d * d / 16);
    }

    #[test]
    fn matched_budgets_are_close() {
        let v = ablation_variants(&small(), true);
        let target = param_count(&v[0].config).total as f64;
        for b in &v[1..] {
            let p = param_count(&b.config).total as f64;
            assert!((p - target).abs() / target < 0.01, "{} {p} vs {target}", b.name);
        }
        let (deep, wide) = parity_pair(&small());
        assert_eq!(wide.config.n_layers * 2, deep.config.n_layers);
        let (a, b) = (param_count(&deep.config).total as f64, param_count(&wide.config).total as f64);
        assert!((a - b).abs() / a < 0.01);
    }

    #[test]
    fn rejects_too_few_iterations() {
        let v = ablation_variants(&small(), false);
        assert!(latency_bench(&v, 9, 0, 8, 0).is_err());
    }

    #[test]
    fn bench_rows_and_csv() {
        let v = ablation_variants(&small(), true);
        let rows = latency_bench(&v[..2], 10, 1, 8, 0).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.median_ms_per_token > 0.0 && r.p90_ms_per_token >= r.median_ms_per_token);
        }
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("variant,median_ms_per_token,p90,flops"));
        assert_eq!(csv.lines().count(), 3);
    }
}
