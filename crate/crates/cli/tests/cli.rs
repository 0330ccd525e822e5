use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synthetic_bytes": 40000,
  "model": {"d_model": 32, "n_heads": 2, "n_layers": 2, "d_ff": 64, "reduction_r": 8, "max_seq_len": 64},
  "train": {"total_steps": 10, "warmup_steps": 2, "seq_len": 32},
  "analysis": {"seq_len": 32, "samples": 3},
  "bench": {"iterations": 10, "warmup": 1, "seq_len": 16}
}"#;

fn siafnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siafnet")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL).unwrap();
    path.to_string_lossy().into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_writes_one_line_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let o = siafnet(&["--out", p(&out), "verify", "--kinds", "LEMMA1_WEIGHT", "--trials", "10", "--perron-frobenius-trials", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let jsonl = std::fs::read_to_string(out.join("checks.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 10);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["kind"], "LEMMA1_WEIGHT");
    }
    assert!(out.join("summary.json").exists());
    assert!(out.join("resolved_config.json").exists());
}

#[test]
fn verify_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = siafnet(&["--seed", "7", "--workers", "2", "--out", p(&out), "verify", "--trials", "3", "--perron-frobenius-trials", "10"]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("checks.jsonl")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 21 * 3);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = siafnet(&["--seed", "3", "--out", p(&first), "verify", "--kinds", "THM3_MLP,LEMMA2_CONCAT_EQ", "--trials", "4"]);
    assert_eq!(code(&o), 0);
    let resolved = first.join("resolved_config.json");
    let second = dir.path().join("second");
    let o = siafnet(&["--config", p(&resolved), "--out", p(&second), "verify"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(first.join("checks.jsonl")).unwrap(),
        std::fs::read(second.join("checks.jsonl")).unwrap()
    );
}

#[test]
fn collapse_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = siafnet(&["--out", p(out), "collapse", "--depth", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out.join("decay_vanilla.csv")).unwrap().lines().count(), 3);
    let o = siafnet(&["--out", p(out), "collapse", "--variant", "augmsa", "--depth", "20"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("decay_augmsa.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("layer,measured,bound"));
    assert_eq!(csv.lines().count(), 22);
    let o = siafnet(&["--out", p(out), "collapse", "--variant", "mlp", "--weight-scale", "1e30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let o = siafnet(&["--config", &cfg, "--out", p(&run), "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 11);
    let ck = run.join("checkpoint");
    let a = dir.path().join("analysis");
    let o = siafnet(&["--config", &cfg, "--out", p(&a), "analyze", "--checkpoint", p(&ck)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let effdim = std::fs::read_to_string(a.join("effdim.csv")).unwrap();
    assert_eq!(effdim.lines().count(), 3);
    for layer in 0..2 {
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(a.join(format!("pca_layer{layer}.json"))).unwrap()).unwrap();
        assert_eq!(v["k"], 3);
    }
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("saliency.json")).unwrap()).unwrap();
    assert_eq!(s["normalization"], "per_sample");
    assert_eq!(s["matrix"].as_array().unwrap().len(), 32);
}

#[test]
fn zero_step_training_and_deterministic_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let zero = dir.path().join("zero");
    let o = siafnet(&["--config", &cfg, "--out", p(&zero), "train", "--steps", "0"]);
    assert_eq!(code(&o), 0);
    assert!(zero.join("checkpoint/manifest.json").exists());
    let weights = |name: &str| {
        let out = dir.path().join(name);
        let o = siafnet(&["--config", &cfg, "--out", p(&out), "train", "--steps", "5"]);
        assert_eq!(code(&o), 0);
        std::fs::read(out.join("checkpoint/weights.bin")).unwrap()
    };
    assert_eq!(weights("a"), weights("b"));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hot.json");
    std::fs::write(
        &path,
        r#"{"synthetic_bytes": 20000,
            "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32, "reduction_r": 4, "max_seq_len": 32},
            "train": {"total_steps": 30, "warmup_steps": 0, "seq_len": 16, "learning_rate": 1e30, "grad_clip": 0.0}}"#,
    )
    .unwrap();
    let o = siafnet(&["--config", p(&path), "--out", p(&dir.path().join("o")), "train"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn fresh_checkpoint_analysis_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let fresh = dir.path().join("fresh");
    assert_eq!(code(&siafnet(&["--config", &cfg, "--out", p(&fresh), "train", "--steps", "0"])), 0);
    let ck = fresh.join("checkpoint");
    let a = dir.path().join("a");
    let o = siafnet(&["--config", &cfg, "--out", p(&a), "analyze", "--checkpoint", p(&ck), "--mode", "effdim"]);
    assert_eq!(code(&o), 0);
    assert!(a.join("effdim.csv").exists() && !a.join("saliency.json").exists());
    let mut bytes = std::fs::read(ck.join("weights.bin")).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(ck.join("weights.bin"), bytes).unwrap();
    let o = siafnet(&["--config", &cfg, "--out", p(&a), "analyze", "--checkpoint", p(&ck)]);
    assert_eq!(code(&o), 4);
}

#[test]
fn bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let one = dir.path().join("one");
    let o = siafnet(&["--config", &cfg, "--out", p(&one), "bench", "--variants", "vanilla"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(one.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("variant,median_ms_per_token,p90,flops"));
    let all = dir.path().join("all");
    let o = siafnet(&["--config", &cfg, "--out", p(&all), "bench"]);
    assert_eq!(code(&o), 0);
    let names: Vec<String> = std::fs::read_to_string(all.join("bench.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    for want in ["vanilla", "siaf", "as", "siaf+as"] {
        assert!(names.iter().any(|n| n == want), "{names:?}");
    }
    assert!(stdout(&o).contains("speedup"));
    let o = siafnet(&["--config", &cfg, "--out", p(&all), "bench", "--variants", "nope"]);
    assert_eq!(code(&o), 5);
}

fn flops(dir: &Path, config: &str) -> serde_json::Value {
    let path = dir.join("cfg.json");
    std::fs::write(&path, config).unwrap();
    let o = siafnet(&["--config", p(&path), "--out", p(dir), "flops", "--tokens", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn flops_reports() {
    let dir = tempfile::tempdir().unwrap();
    let dense = flops(dir.path(), r#"{"model": {"reduction_r": 1}}"#);
    let narrow = flops(dir.path(), r#"{"model": {"reduction_r": 32}}"#);
    let d = dense["shortcut"]["per_shortcut"].as_u64().unwrap();
    let n = narrow["shortcut"]["per_shortcut"].as_u64().unwrap();
    assert_eq!(d, 16 * n);
    assert_eq!(d, dense["shortcut"]["n_d_squared"].as_u64().unwrap());
    let none = flops(dir.path(), r#"{"model": {"shortcut_t": 0}}"#);
    assert_eq!(none["flops"]["shortcuts"], 0);
    let big = flops(
        dir.path(),
        r#"{"model": {"d_model": 2048, "n_heads": 16, "n_layers": 12, "d_ff": 5632, "vocab_size": 100000, "max_seq_len": 2048}}"#,
    );
    assert!(big["params"]["total"].as_u64().unwrap() > 500_000_000);
}

#[test]
fn strict_schema_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"d_model": 64, "typo": 1}}"#).unwrap();
    let o = siafnet(&["--config", p(&path), "--out", p(dir.path()), "flops"]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo"));
    assert_eq!(code(&siafnet(&["verify", "--kinds", "NOT_A_KIND", "--out", p(dir.path())])), 5);
    assert_eq!(code(&siafnet(&["frobnicate"])), 5);
    assert_eq!(code(&siafnet(&["--help"])), 0);
}
