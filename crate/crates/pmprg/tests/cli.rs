//! End-to-end exercises of the command-line binary: exit codes, artifact
//! layout, and the evaluate count diagnostic.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pmprg");

const MICRO_CONFIG: &str = r#"{
  "profile": "desk",
  "corpus": {"n_patients": 10, "patch": 24, "max_slides": 2},
  "dims": {"g": 2, "d_c": 8, "d_r": 8, "d_prime": 8, "d": 8,
           "vit_depth": 1, "vit_heads": 2, "dino_out": 12, "dino_hidden": 10,
           "cls_hidden": 8, "lm_width": 16, "lm_blocks": 1, "lm_heads": 2,
           "lm_max_len": 16},
  "stage1": {"epochs": 1, "batch": 8, "grad_accum_chunk": 4},
  "stage2": {"epochs": 2, "lm_warmup_epochs": 2, "lm_warmup_batch": 8}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn pmprg")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "`pmprg {}` failed with {:?}\nstderr:\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("Usage"));
    let version = run(&["--version"]);
    assert_eq!(exit_code(&version), 0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth", "--bogus"]);
    assert_eq!(exit_code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn missing_corpus_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["split", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("synth"), "stderr should hint at synth: {stderr}");
}

#[test]
fn unknown_ablation_variant_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["ablate", "bogus", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("s1, s2, s3"), "stderr should list variants: {stderr}");
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, MICRO_CONFIG).unwrap();
    let out_dir = dir.path().join("out");
    let cfg = cfg_path.to_str().unwrap();
    let out = out_dir.to_str().unwrap();

    for cmd in [
        "synth",
        "split",
        "train-stage1",
        "extract-features",
        "train-stage2",
        "generate",
        "evaluate",
        "export-attention",
    ] {
        run_ok(&[cmd, "--config", cfg, "--out", out]);
    }

    // Artifact layout.
    for rel in [
        "corpus/corpus.json",
        "splits.json",
        "stage1/enc_r.mrck",
        "stage1/enc_s.mrck",
        "features/manifest.json",
        "stage2/vocab.json",
        "stage2/generator.mrck",
        "metrics.json",
        "per_patient.csv",
    ] {
        assert!(out_dir.join(rel).exists(), "missing artifact {rel}");
    }

    // Splits partition the corpus.
    let splits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("splits.json")).unwrap())
            .unwrap();
    let n: usize = ["train", "val", "test"]
        .iter()
        .map(|k| splits[k].as_array().unwrap().len())
        .sum();
    assert_eq!(n, 10);
    let test_ids: Vec<String> = splits["test"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert!(!test_ids.is_empty());
    for pid in &test_ids {
        assert!(out_dir.join("reports").join(format!("{pid}.txt")).exists());
        assert!(out_dir.join("reports").join(format!("{pid}.json")).exists());
    }

    // Ablation over all three scenarios.
    run_ok(&["ablate", "--config", cfg, "--out", out]);
    let ablation: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap())
            .unwrap();
    let rows = ablation.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let variants: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["s1", "s2", "s3"]);
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,ce_accuracy,"));
    assert_eq!(csv.lines().count(), 4);

    // Removing a sidecar breaks the generated/test pairing: evaluate must
    // fail with a count diagnostic, not silently score a subset.
    std::fs::remove_file(out_dir.join("reports").join(format!("{}.json", test_ids[0]))).unwrap();
    let bad = run(&["evaluate", "--config", cfg, "--out", out]);
    assert_eq!(exit_code(&bad), 2);
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(
        stderr.contains("report count mismatch"),
        "stderr should carry the count diagnostic: {stderr}"
    );
}

#[test]
fn seed_override_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, MICRO_CONFIG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    run_ok(&["synth", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["synth", "--config", cfg, "--seed", "99", "--out", b.to_str().unwrap()]);
    run_ok(&["synth", "--config", cfg, "--out", c.to_str().unwrap()]);
    let read = |p: &Path| std::fs::read(p.join("corpus/corpus.json")).unwrap();
    assert_ne!(read(&a), read(&b), "a different seed must change the corpus");
    assert_eq!(read(&a), read(&c), "the same seed must reproduce the corpus");
}
