//! Subcommands of the `siafnet` binary. Each one resolves a [`RunConfig`],
//! writes `resolved_config.json` into the output directory and returns a
//! process exit code.

pub mod config;

use clap::{Parser, Subcommand};
use config::{AnalysisMode, RunConfig};
use siafnet::analysis::{
    ablation_variants, capture_features, compare_profiles, effective_dimension_profile, latency_bench, parity_pair,
    pca_export, saliency, write_bench_csv, BenchVariant, EffDimProfile,
};
use siafnet::model::{count_flops, param_count, shortcut_flops, Checkpoint, Model, ModelConfig};
use siafnet::theory::{collapse_demo, perron_frobenius_demo, run_suite, BoundKind, CollapseVariant, Dims};
use siafnet::train::{synthetic_text, train, Corpus, Precision};
use siafnet::{Error, Scalar};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_TRAINING_ABORTED: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;
/// Bad arguments, invalid configuration or I/O failure.
pub const EXIT_USAGE: i32 = 5;

/// Seed of the built-in synthetic corpus; fixed so every run trains on the
/// same text regardless of `--seed`.
const SYNTHETIC_CORPUS_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "siafnet", version, about = "Feature-diversity verification, training and analysis")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; default `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed for sampling, initialization and batching.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the verification suite.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized numerical checks of every diversity bound.
    Verify {
        /// Comma-separated bound kinds; default all.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        /// Trials per bound kind.
        #[arg(long)]
        trials: Option<usize>,
        /// Sinkhorn-projected attention matrices to test; 0 skips the demo.
        #[arg(long)]
        perron_frobenius_trials: Option<usize>,
    },
    /// Diversity decay through a deep stack against its bound.
    Collapse {
        /// vanilla, augmsa, mlp, siaf or combined.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        depth: Option<usize>,
        /// Explicit weight multiplier instead of the contraction calibration.
        #[arg(long)]
        weight_scale: Option<f64>,
    },
    /// Byte-level language-model training.
    Train {
        /// Byte corpus file; default a built-in synthetic text.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Effective dimension, PCA export and saliency of a checkpoint.
    Analyze {
        /// Checkpoint directory to analyze; it is never modified.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<AnalysisMode>,
        /// Second checkpoint whose effective-dimension profile is tabulated alongside.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Corpus the analysis windows are drawn from.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Forward latency of architecture variants.
    Bench {
        /// Comma-separated: vanilla, siaf, as, siaf+as, vanilla_deep, pangu_pi_wide.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Timed samples per variant; at least 10.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Analytic multiply-add and parameter counts as JSON.
    Flops {
        /// Sequence length; default `train.seq_len`.
        #[arg(long)]
        tokens: Option<usize>,
    },
}

/// A failure carrying the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } => EXIT_TRAINING_ABORTED,
            Error::Corrupt(_) => EXIT_CORRUPT,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<i32, Failure>;

/// Builds the resolved configuration: defaults, then the config file, then
/// global flags, then subcommand flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::Verify {
            kinds,
            trials,
            perron_frobenius_trials,
        } => {
            if let Some(names) = kinds {
                cfg.verify.kinds = names
                    .iter()
                    .map(|s| s.parse::<BoundKind>())
                    .collect::<siafnet::Result<_>>()?;
            }
            if let Some(t) = trials {
                cfg.verify.trials = *t;
            }
            if let Some(t) = perron_frobenius_trials {
                cfg.verify.perron_frobenius_trials = *t;
            }
        }
        Command::Collapse {
            variant,
            depth,
            weight_scale,
        } => {
            if let Some(v) = variant {
                cfg.collapse.variant = v.parse::<CollapseVariant>()?;
            }
            if let Some(d) = depth {
                cfg.collapse.depth = *d;
            }
            if weight_scale.is_some() {
                cfg.collapse.weight_scale = *weight_scale;
            }
        }
        Command::Train { corpus, steps } => {
            if corpus.is_some() {
                cfg.corpus = corpus.clone();
            }
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(*s);
            }
        }
        Command::Analyze {
            checkpoint,
            mode,
            compare,
            corpus,
        } => {
            if checkpoint.is_some() {
                cfg.analysis.checkpoint = checkpoint.clone();
            }
            if let Some(m) = mode {
                cfg.analysis.mode = *m;
            }
            if compare.is_some() {
                cfg.analysis.compare_checkpoint = compare.clone();
            }
            if corpus.is_some() {
                cfg.corpus = corpus.clone();
            }
        }
        Command::Bench { variants, iterations } => {
            if let Some(v) = variants {
                cfg.bench.variants = v.clone();
            }
            if let Some(i) = iterations {
                cfg.bench.iterations = *i;
            }
        }
        Command::Flops { .. } => {}
    }
    cfg.resolve().map_err(Failure::usage)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let outcome = resolve_config(cli).and_then(|cfg| {
        std::fs::create_dir_all(&cfg.out)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", cfg.out.display())))?;
        cfg.write_resolved().map_err(Failure::usage)?;
        dispatch(&cli.command, &cfg)
    });
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Outcome {
    match command {
        Command::Verify { .. } => cmd_verify(cfg),
        Command::Collapse { .. } => cmd_collapse(cfg),
        Command::Train { .. } => cmd_train(cfg),
        Command::Analyze { .. } => cmd_analyze(cfg),
        Command::Bench { .. } => cmd_bench(cfg),
        Command::Flops { tokens } => cmd_flops(cfg, *tokens),
    }
}

pub fn cmd_verify(cfg: &RunConfig) -> Outcome {
    let kinds = if cfg.verify.kinds.is_empty() {
        BoundKind::ALL.to_vec()
    } else {
        cfg.verify.kinds.clone()
    };
    let start = std::time::Instant::now();
    let report = run_suite(&kinds, cfg.verify.trials, cfg.seed, &cfg.verify.ranges, cfg.workers)?;
    report.write(&cfg.out)?;
    for s in &report.summaries {
        println!(
            "{:<28} passed {:>5}  failed {:>3}  inconclusive {:>3}  min slack {}",
            s.kind.tag(),
            s.passed,
            s.failed,
            s.inconclusive,
            s.min_relative_slack.map_or("n/a".into(), |v| format!("{v:.3e}"))
        );
    }
    println!(
        "{} checks in {:.1}s: {} failed, {} inconclusive",
        report.checks.len(),
        start.elapsed().as_secs_f64(),
        report.failures(),
        report.inconclusive()
    );
    let mut ok = report.all_passed();
    if let Some(worst) = report.worst_failure() {
        println!(
            "worst: {} seed {} dims {:?} relative slack {:.3e}",
            worst.kind.tag(),
            worst.seed,
            worst.dims,
            worst.relative_slack()
        );
    }
    if cfg.verify.perron_frobenius_trials > 0 {
        let pf = perron_frobenius_demo(cfg.verify.perron_frobenius_trials, cfg.verify.ranges.n, cfg.seed)?;
        siafnet::io::write_json_atomic(&cfg.out.join("perron_frobenius.json"), &pf)?;
        println!(
            "perron-frobenius: {} matrices, max lambda {:.4}, all below one: {}",
            pf.trials, pf.max_lambda, pf.all_below_one
        );
        ok &= pf.all_below_one;
    }
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

pub fn cmd_collapse(cfg: &RunConfig) -> Outcome {
    let c = &cfg.collapse;
    let dims = Dims {
        n: c.n,
        d: c.d,
        heads: c.heads,
        depth: c.depth,
    };
    let curve = collapse_demo(c.variant, c.depth, &dims, cfg.seed, c.weight_scale)?;
    let path = curve.write(&cfg.out)?;
    println!(
        "{}: depth {}, final measured ratio {:.3e}, final bound ratio {:.3e}, dominated {}",
        c.variant,
        curve.points.len() - 1,
        curve.final_ratio(),
        curve.final_bound_ratio(),
        curve.dominated(1e-9)
    );
    println!("wrote {}", path.display());
    if curve.diverged {
        eprintln!("error: propagation diverged");
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, Failure> {
    let corpus = match &cfg.corpus {
        Some(path) => Corpus::from_file(path, cfg.train.val_fraction)?,
        None => Corpus::from_bytes(synthetic_text(cfg.synthetic_bytes, SYNTHETIC_CORPUS_SEED), cfg.train.val_fraction)?,
    };
    Ok(corpus)
}

fn train_as<T: Scalar>(cfg: &RunConfig, corpus: &Corpus) -> Outcome {
    let outcome = train::<T>(&cfg.model, &cfg.train, corpus, None, Some(&cfg.out))?;
    match (outcome.metrics.first(), outcome.metrics.last()) {
        (Some(a), Some(b)) => println!(
            "{} steps: loss {:.4} -> {:.4} (ln vocab {:.4})",
            outcome.metrics.len(),
            a.loss,
            b.loss,
            (cfg.model.vocab_size as f64).ln()
        ),
        _ => println!("0 steps: initial checkpoint written"),
    }
    println!("wrote {}", cfg.out.display());
    Ok(EXIT_OK)
}

pub fn cmd_train(cfg: &RunConfig) -> Outcome {
    let corpus = load_corpus(cfg)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, &corpus),
        Precision::F64 => train_as::<f64>(cfg, &corpus),
    }
}

fn load_model(path: &Path) -> Result<Model<f64>, Failure> {
    let ck = Checkpoint::<f64>::load(path)?;
    Ok(Model::from_checkpoint(ck)?)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Outcome {
    let a = &cfg.analysis;
    let path = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::usage("analyze needs --checkpoint or analysis.checkpoint"))?;
    let model = load_model(path)?;
    let corpus = load_corpus(cfg)?;
    let windows = corpus.analysis_windows(a.samples, a.seq_len)?;
    let want = |m: AnalysisMode| a.mode == m || a.mode == AnalysisMode::All;
    if want(AnalysisMode::Effdim) || want(AnalysisMode::Pca) {
        let records = capture_features(&model, &windows, &a.capture)?;
        if want(AnalysisMode::Effdim) {
            let profile = EffDimProfile::from_records(&records);
            profile.write(&cfg.out.join("effdim.csv"))?;
            let dims: Vec<String> = profile.rows.iter().map(|r| r.d_eps.to_string()).collect();
            println!("d({}) per layer: {}", profile.epsilon, dims.join(" "));
            let degenerate = profile.degenerate_layers();
            if !degenerate.is_empty() {
                println!("degenerate layers: {degenerate:?}");
            }
            if let Some(other) = &a.compare_checkpoint {
                let other_profile = effective_dimension_profile(&load_model(other)?, &windows, &a.capture)?;
                let table = compare_profiles("primary", &profile, "compare", &other_profile);
                siafnet::io::write_atomic(&cfg.out.join("effdim_compare.csv"), table.as_bytes())?;
                print!("{table}");
            }
        }
        if want(AnalysisMode::Pca) {
            for export in pca_export(&records, a.capture.pca_k)? {
                let p = export.write(&cfg.out)?;
                println!("layer {} explained {:.4} -> {}", export.layer, export.explained, p.display());
            }
        }
    }
    if want(AnalysisMode::Saliency) {
        let tokens = &windows[0];
        let target = a.target_position.unwrap_or(tokens.len().saturating_sub(2));
        let map = saliency(&model, tokens, target)?;
        map.write(&cfg.out.join("saliency.json"))?;
        println!(
            "saliency at position {} (target {}), log p = {:.4}{}",
            map.target_position,
            map.target_token,
            map.log_prob,
            if map.all_zero { ", all-zero gradient" } else { "" }
        );
    }
    Ok(EXIT_OK)
}

fn bench_variants(cfg: &RunConfig) -> Result<Vec<BenchVariant>, Failure> {
    let mut known = ablation_variants(&cfg.model, cfg.bench.match_params);
    let (deep, wide) = parity_pair(&cfg.model);
    known.extend([deep, wide]);
    if cfg.bench.variants.is_empty() {
        return Err(Failure::usage("bench needs at least one variant"));
    }
    cfg.bench
        .variants
        .iter()
        .map(|name| {
            known.iter().find(|v| &v.name == name).cloned().ok_or_else(|| {
                let names: Vec<&str> = known.iter().map(|v| v.name.as_str()).collect();
                Failure::usage(format!("unknown variant '{name}', expected one of {}", names.join(", ")))
            })
        })
        .collect()
}

pub fn cmd_bench(cfg: &RunConfig) -> Outcome {
    let variants = bench_variants(cfg)?;
    let b = &cfg.bench;
    let rows = latency_bench(&variants, b.iterations, b.warmup, b.seq_len, cfg.seed)?;
    write_bench_csv(&rows, &cfg.out.join("bench.csv"))?;
    println!("{:<14} {:>12} {:>14} {:>12} {:>12}", "variant", "params", "flops", "median ms/t", "p90 ms/t");
    for r in &rows {
        println!(
            "{:<14} {:>12} {:>14} {:>12.5} {:>12.5}",
            r.variant, r.params, r.flops, r.median_ms_per_token, r.p90_ms_per_token
        );
    }
    let median = |name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.median_ms_per_token);
    if let (Some(deep), Some(wide)) = (median("vanilla_deep"), median("pangu_pi_wide")) {
        println!("speedup of pangu_pi_wide over vanilla_deep at parameter parity: {:.2}x", deep / wide);
    }
    Ok(EXIT_OK)
}

pub fn flops_report(model: &ModelConfig, tokens: usize) -> serde_json::Value {
    let n = tokens as u64;
    let d = model.d_model as u64;
    let dense = ModelConfig {
        reduction_r: 1,
        ..model.clone()
    };
    serde_json::json!({
        "tokens": tokens,
        "flops": count_flops(model, tokens),
        "params": param_count(model),
        "shortcut": {
            "reduction_r": model.reduction_r,
            "per_shortcut": shortcut_flops(model, n),
            "dense_per_shortcut": shortcut_flops(&dense, n),
            "n_d_squared": n * d * d,
        },
    })
}

pub fn cmd_flops(cfg: &RunConfig, tokens: Option<usize>) -> Outcome {
    let report = flops_report(&cfg.model, tokens.unwrap_or(cfg.train.seq_len));
    siafnet::io::write_json_atomic(&cfg.out.join("flops.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(EXIT_OK)
}
