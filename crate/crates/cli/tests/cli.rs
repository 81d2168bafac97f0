//! End-to-end CLI behavior: exit codes, determinism, file contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sar"))
}

fn run(args: &[&str]) -> Output {
    sar().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn synth(&self, n: usize, seed: u64) {
        let out = run(&[
            "synth",
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
            "--out-source",
            &self.p("source.jsonl"),
            "--out-target",
            &self.p("target.jsonl"),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }

    fn small_config(&self, name: &str, extra: &str) -> String {
        let cfg = format!(
            r#"{{"regime": "indomain", "seed": 7, "epochs": 4, "batch_size": 4,
                "embed_dim": 10, "word_hidden": 8, "conv_hidden": 8, "dropout_rate": 0.2{extra}}}"#
        );
        write(&self.path(name), &cfg);
        self.p(name)
    }
}

#[test]
fn train_writes_checkpoint_and_history_with_one_entry_per_epoch() {
    let ws = Workspace::new();
    ws.synth(20, 5);
    let cfg = ws.small_config("cfg.json", "");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(ws.path("model.ckpt").exists());
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("model.ckpt.history.json")).unwrap())
            .unwrap();
    assert_eq!(history.as_array().unwrap().len(), 4);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("dev accuracy"));
    assert!(stdout.contains("macro-F1"));
}

#[test]
fn default_epoch_count_is_thirty() {
    let ws = Workspace::new();
    ws.synth(6, 11);
    write(
        &ws.path("cfg.json"),
        r#"{"regime": "indomain", "seed": 3, "batch_size": 4,
            "embed_dim": 6, "word_hidden": 4, "conv_hidden": 4}"#,
    );
    let out = run(&[
        "train",
        "--config",
        &ws.p("cfg.json"),
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("model.ckpt.history.json")).unwrap())
            .unwrap();
    assert_eq!(history.as_array().unwrap().len(), 30);
}

#[test]
fn missing_dev_flag_is_usage_error() {
    let ws = Workspace::new();
    ws.synth(4, 5);
    let cfg = ws.small_config("cfg.json", "");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let ws = Workspace::new();
    ws.synth(4, 5);
    let cfg = ws.small_config("cfg.json", r#", "learning_rate_typo": 3"#);
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate_typo"));
}

#[test]
fn train_rejects_non_indomain_regime() {
    let ws = Workspace::new();
    ws.synth(4, 5);
    write(
        &ws.path("cfg.json"),
        r#"{"regime": "merge", "seed": 7, "epochs": 2}"#,
    );
    let out = run(&[
        "train",
        "--config",
        &ws.p("cfg.json"),
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("indomain"));
}

#[test]
fn fixed_seed_reruns_produce_byte_identical_checkpoints() {
    let ws = Workspace::new();
    ws.synth(8, 9);
    let cfg = ws.small_config("cfg.json", "");
    for name in ["a.ckpt", "b.ckpt"] {
        let out = run(&[
            "train",
            "--config",
            &cfg,
            "--train",
            &ws.p("source.jsonl"),
            "--dev",
            &ws.p("target.jsonl"),
            "--out",
            &ws.p(name),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = std::fs::read(ws.path("a.ckpt")).unwrap();
    let b = std::fs::read(ws.path("b.ckpt")).unwrap();
    assert_eq!(a, b, "checkpoints differ between identical runs");
}

#[test]
fn adapt_unsup_smoke_records_lambda_curve_and_rejects_leakage() {
    let ws = Workspace::new();
    ws.synth(10, 13);
    write(
        &ws.path("adapt.json"),
        &format!(
            r#"{{"regime": "adapt-unsup", "seed": 2, "epochs": 3, "batch_size": 4,
                "embed_dim": 8, "word_hidden": 6, "conv_hidden": 6, "disc_hidden": 6,
                "dropout_rate": 0.2, "dev_path": {:?}}}"#,
            ws.p("target.jsonl")
        ),
    );
    let out = run(&[
        "adapt",
        "--mode",
        "unsup",
        "--source",
        &ws.p("source.jsonl"),
        "--target-unlabeled",
        &ws.p("target.jsonl"),
        "--config",
        &ws.p("adapt.json"),
        "--out",
        &ws.p("adapted.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("adapted.ckpt.history.json")).unwrap())
            .unwrap();
    let lambdas: Vec<f64> = history
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["lambda"].as_f64().expect("λ recorded"))
        .collect();
    assert!(lambdas.windows(2).all(|w| w[1] > w[0]), "λ curve {lambdas:?}");

    // passing --target-labeled in unsup mode must fail loudly
    let out = run(&[
        "adapt",
        "--mode",
        "unsup",
        "--source",
        &ws.p("source.jsonl"),
        "--target-labeled",
        &ws.p("target.jsonl"),
        "--target-unlabeled",
        &ws.p("target.jsonl"),
        "--config",
        &ws.p("adapt.json"),
        "--out",
        &ws.p("adapted2.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("target-labeled"));
}

#[test]
fn adapt_requires_dev_path_in_config() {
    let ws = Workspace::new();
    ws.synth(6, 14);
    write(
        &ws.path("adapt.json"),
        r#"{"regime": "adapt-unsup", "seed": 2, "epochs": 2, "batch_size": 4,
            "embed_dim": 8, "word_hidden": 6, "conv_hidden": 6}"#,
    );
    let out = run(&[
        "adapt",
        "--mode",
        "unsup",
        "--source",
        &ws.p("source.jsonl"),
        "--target-unlabeled",
        &ws.p("target.jsonl"),
        "--config",
        &ws.p("adapt.json"),
        "--out",
        &ws.p("adapted.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dev_path"));
}

#[test]
fn eval_writes_schema_valid_report_and_consistent_confusion() {
    let ws = Workspace::new();
    ws.synth(10, 21);
    let cfg = ws.small_config("cfg.json", "");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(&[
        "eval",
        "--model",
        &ws.p("model.ckpt"),
        "--test",
        &ws.p("target.jsonl"),
        "--report",
        &ws.p("report.json"),
        "--confusion",
        &ws.p("confusion.csv"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: sar_core::metrics::RunReport =
        serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert!(report.accuracy >= 0.0 && report.accuracy <= 1.0);
    assert_eq!(report.per_class.len(), 5);

    // confusion CSV row sums equal per-class gold counts
    let csv = std::fs::read_to_string(ws.path("confusion.csv")).unwrap();
    let mut gold_counts = [0usize; 5];
    let target = std::fs::read_to_string(ws.path("target.jsonl")).unwrap();
    for line in target.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for c in v["comments"].as_array().unwrap() {
            for s in c["sentences"].as_array().unwrap() {
                let act = s["act"].as_str().unwrap();
                let idx = ["SU", "R", "Q", "P", "ST"].iter().position(|t| *t == act).unwrap();
                gold_counts[idx] += 1;
            }
        }
    }
    for (i, line) in csv.lines().skip(1).enumerate() {
        let sum: usize = line
            .split(',')
            .skip(1)
            .map(|f| f.parse::<usize>().unwrap())
            .sum();
        assert_eq!(sum, gold_counts[i], "row {i} of confusion miscounts");
    }
}

#[test]
fn eval_rejects_unlabeled_test_sentences_listing_ids() {
    let ws = Workspace::new();
    ws.synth(6, 22);
    let cfg = ws.small_config("cfg.json", "");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    write(
        &ws.path("unlabeled.jsonl"),
        r#"{"id":"mystery","domain":"target","comments":[{"speaker":"a","sentences":[{"text":"who knows this","act":null}]}]}"#,
    );
    let out = run(&[
        "eval",
        "--model",
        &ws.p("model.ckpt"),
        "--test",
        &ws.p("unlabeled.jsonl"),
        "--report",
        &ws.p("report.json"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("mystery"));
}

#[test]
fn predict_fills_labels_preserves_existing_and_is_deterministic() {
    let ws = Workspace::new();
    ws.synth(8, 23);
    let cfg = ws.small_config("cfg.json", "");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("source.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    // fully labeled input: the output file equals the input byte for byte
    let out = run(&[
        "predict",
        "--model",
        &ws.p("model.ckpt"),
        "--input",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("same.jsonl"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("agreement"));
    assert_eq!(
        std::fs::read(ws.path("target.jsonl")).unwrap(),
        std::fs::read(ws.path("same.jsonl")).unwrap()
    );

    // strip the labels; every act comes back filled with a valid tag
    let stripped: String = std::fs::read_to_string(ws.path("target.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            for c in v["comments"].as_array_mut().unwrap() {
                for s in c["sentences"].as_array_mut().unwrap() {
                    s["act"] = serde_json::Value::Null;
                }
            }
            format!("{v}\n")
        })
        .collect();
    write(&ws.path("stripped.jsonl"), &stripped);
    for name in ["pred1.jsonl", "pred2.jsonl"] {
        let out = run(&[
            "predict",
            "--model",
            &ws.p("model.ckpt"),
            "--input",
            &ws.p("stripped.jsonl"),
            "--out",
            &ws.p(name),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let p1 = std::fs::read(ws.path("pred1.jsonl")).unwrap();
    assert_eq!(p1, std::fs::read(ws.path("pred2.jsonl")).unwrap());
    let text = String::from_utf8(p1).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for c in v["comments"].as_array().unwrap() {
            for s in c["sentences"].as_array().unwrap() {
                let act = s["act"].as_str().expect("act filled");
                assert!(["SU", "R", "Q", "P", "ST"].contains(&act));
            }
        }
    }
}

#[test]
fn verify_all_passes() {
    let out = run(&["verify", "--suite", "all"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    for suite in ["grad", "crf", "schedule"] {
        assert!(stdout.contains(&format!("suite {suite}: PASS")), "{stdout}");
    }
}

#[test]
fn synth_is_deterministic_and_counts_match() {
    let ws = Workspace::new();
    for (s, t) in [("s1.jsonl", "t1.jsonl"), ("s2.jsonl", "t2.jsonl")] {
        let out = run(&[
            "synth",
            "--n",
            "10",
            "--seed",
            "77",
            "--out-source",
            &ws.p(s),
            "--out-target",
            &ws.p(t),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let s1 = std::fs::read(ws.path("s1.jsonl")).unwrap();
    assert_eq!(s1, std::fs::read(ws.path("s2.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(ws.path("t1.jsonl")).unwrap(),
        std::fs::read(ws.path("t2.jsonl")).unwrap()
    );
    assert_eq!(String::from_utf8(s1).unwrap().lines().count(), 10);
}

#[test]
fn synth_rejects_invalid_profile() {
    let ws = Workspace::new();
    write(&ws.path("bad.json"), r#"{"initial": [1.0]}"#);
    let out = run(&[
        "synth",
        "--profile",
        &ws.p("bad.json"),
        "--n",
        "3",
        "--seed",
        "1",
        "--out-source",
        &ws.p("s.jsonl"),
        "--out-target",
        &ws.p("t.jsonl"),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn malformed_corpus_is_usage_error_with_line_number() {
    let ws = Workspace::new();
    ws.synth(4, 31);
    let cfg = ws.small_config("cfg.json", "");
    write(&ws.path("broken.jsonl"), "{oops\n");
    let out = run(&[
        "train",
        "--config",
        &cfg,
        "--train",
        &ws.p("broken.jsonl"),
        "--dev",
        &ws.p("target.jsonl"),
        "--out",
        &ws.p("model.ckpt"),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 1"));
}
