use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn selftag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selftag"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = selftag(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = selftag(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "teacher_epochs=2",
    "--set",
    "student_epochs=1",
    "--set",
    "max_iterations=1",
    "--t-passes",
    "3",
];

/// Synthetic corpus and split in a fresh directory.
fn prepared() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["synth", "--out", "corpus.conll", "--sentences", "200", "--seed", "3"]);
    ok(dir.path(), &["split", "--input", "corpus.conll", "--shots", "3", "--out", "split"]);
    dir
}

fn selftrain(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["selftrain", "--split", "split", "--seeds", "1,2", "--out", out];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    selftag(dir, &args)
}

#[test]
fn evaluate_identical_files_scores_full_marks() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("g.conll"), "EU B-ORG\nrejects O\nGerman B-MISC\n\nPeter B-PER\nBlackburn I-PER\n").unwrap();
    let out = ok(dir.path(), &["evaluate", "--gold", "g.conll", "--pred", "g.conll", "--out", "m"]);
    assert!(out.contains("F1 = 100.00"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["f1"], 1.0);
}

#[test]
fn evaluate_rejects_misaligned_predictions() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("g.conll"), "a B-X\nb O\n").unwrap();
    fs::write(dir.path().join("p.conll"), "a B-X\nc O\n").unwrap();
    let err = fails(dir.path(), &["evaluate", "--gold", "g.conll", "--pred", "p.conll"]);
    assert!(err.contains("pred"), "{err}");
}

#[test]
fn invalid_tau_names_field_and_constraint() {
    let dir = prepared();
    let err = String::from_utf8(selftrain(dir.path(), "run", &["--tau", "0.5"]).stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("tau") && err.contains("tau > 1"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn unknown_config_field_is_named() {
    let dir = prepared();
    fs::write(dir.path().join("bad.toml"), "learning_rate = 0.01\ntemperature = 2\n").unwrap();
    let err = fails(dir.path(), &["selftrain", "--split", "split", "--config", "bad.toml", "--out", "run"]);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("temperature"), "{err}");
}

#[test]
fn missing_file_is_named() {
    let dir = TempDir::new().unwrap();
    let err = fails(dir.path(), &["split", "--input", "nowhere.conll", "--out", "s"]);
    assert!(err.contains("nowhere.conll"), "{err}");
    let err = fails(dir.path(), &["selftrain", "--split", "nosplit", "--out", "r"]);
    assert!(err.contains("nosplit"), "{err}");
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = prepared();
    for out in ["a", "b"] {
        let o = selftrain(dir.path(), out, &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/metrics.json")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.json")).unwrap();
    assert_eq!(a, b);
    let json: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(json["seeds"], serde_json::json!([1, 2]));
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);
    for f in ["config.toml", "seed_1/best.json", "seed_1/records.jsonl", "seed_2/checkpoints/iter_1.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn modes_write_separate_metrics_and_flags_override_config() {
    let dir = prepared();
    fs::write(dir.path().join("c.toml"), "mode = \"sequst\"\nrho = 0.9\n").unwrap();
    for (out, mode) in [("sst", "sst"), ("sequst", "sequst")] {
        let o = selftrain(dir.path(), out, &["--config", "c.toml", "--mode", mode, "--rho", "0.7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(out).join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["mode"], mode);
        let cfg = fs::read_to_string(dir.path().join(out).join("config.toml")).unwrap();
        assert!(cfg.contains("rho = 0.7"), "{cfg}");
    }
}

#[test]
fn train_analyze_export_round() {
    let dir = prepared();
    let mut args = vec!["train", "--split", "split", "--seed", "5", "--out", "sup"];
    args.extend_from_slice(&TINY);
    let out = ok(dir.path(), &args);
    assert!(out.contains("supervised_only"), "{out}");
    assert!(!dir.path().join("sup/seed_5/selection").exists());

    let out = ok(
        dir.path(),
        &["analyze", "--checkpoint", "sup/seed_5/best.json", "--split", "split", "--t-passes", "3", "--out", "an"],
    );
    for s in ["none", "confidence", "certainty", "both"] {
        assert!(out.contains(s), "{out}");
    }
    let lines = fs::read_to_string(dir.path().join("an/selection.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["bald"].is_number() && first["selected"].is_boolean());

    ok(
        dir.path(),
        &["export-embeddings", "--checkpoint", "sup/seed_5/best.json", "--input", "split/validation.conll", "--out", "emb.jsonl"],
    );
    let text = fs::read_to_string(dir.path().join("emb.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(row["hidden"].as_array().unwrap().len(), 64);

    let out = ok(
        dir.path(),
        &["evaluate", "--checkpoint", "sup/seed_5/best.json", "--test", "split/validation.conll"],
    );
    assert!(out.contains("F1 = "), "{out}");
}

#[test]
fn unknown_subcommand_fails() {
    let dir = TempDir::new().unwrap();
    let err = fails(dir.path(), &["frobnicate"]);
    assert!(err.contains("frobnicate"), "{err}");
}
