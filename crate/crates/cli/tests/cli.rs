use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn crow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crow(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_discover_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run1");
    ok(&["synth", "--preset", "s1", "--out", p(&data)]);
    for file in ["source.cef", "target.cef", "truth.csv", "scenario.json", "invocation.json"] {
        assert!(data.join(file).exists(), "{file} missing");
    }

    let summary = ok(&[
        "discover",
        "--source", p(&data.join("source.cef")),
        "--target", p(&data.join("target.cef")),
        "--num-target-classes", "15",
        "--truth", p(&data.join("truth.csv")),
        "--out", p(&run),
    ]);
    assert!(summary.starts_with("h_score="), "{summary}");
    let report = read_json(&run.join("report.json"));
    assert!(report["h_score"].as_f64().unwrap() >= 0.95);
    for file in ["predictions.csv", "run_report.json", "train_log.jsonl", "model.cef", "model.json", "invocation.json"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let invocation = read_json(&run.join("invocation.json"));
    assert_eq!(invocation["seed"], 0);
    assert_eq!(invocation["version"], env!("CARGO_PKG_VERSION"));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1000);

    let eval_dir = tmp.path().join("eval");
    ok(&[
        "eval",
        "--pred", p(&run.join("predictions.csv")),
        "--truth", p(&data.join("truth.csv")),
        "--seen-count", "10",
        "--out", p(&eval_dir),
    ]);
    assert_eq!(fs::read(eval_dir.join("report.json")).unwrap(), fs::read(run.join("report.json")).unwrap());
}

#[test]
fn identical_invocations_write_identical_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--preset", "bimodal-overlap", "--out", p(&data)]);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&[
            "discover",
            "--source", p(&data.join("source.cef")),
            "--target", p(&data.join("target.cef")),
            "--num-target-classes", "5",
            "--seed", "3",
            "--iters", "200",
            "--adapter", "none",
            "--out", p(&out),
        ]);
        outputs.push(fs::read(out.join("predictions.csv")).unwrap());
        let invocation = read_json(&out.join("invocation.json"));
        assert_eq!(invocation["config"]["seed"], 3);
        assert_eq!(invocation["config"]["adapter_kind"], "none");
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn usage_errors_exit_two() {
    let missing_k = crow(&["discover", "--source", "s.cef", "--target", "t.cef", "--out", "o"]);
    assert_eq!(missing_k.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_k.stderr).contains("--num-target-classes"));

    let missing_threshold =
        crow(&["baseline-simple", "--source", "s.cef", "--target", "t.cef", "--num-target-classes", "3", "--out", "o"]);
    assert_eq!(missing_threshold.status.code(), Some(2));

    let bad_tau = crow(&["discover", "--source", "s.cef", "--target", "t.cef", "--num-target-classes", "3", "--tau", "1.5", "--out", "o"]);
    assert_eq!(bad_tau.status.code(), Some(2));

    let bad_range = crow(&["estimate-k", "--source", "s.cef", "--target", "t.cef", "--k-min", "9", "--k-max", "3", "--out", "o"]);
    assert_eq!(bad_range.status.code(), Some(2));

    assert_eq!(crow(&["synth", "--preset", "nope", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_and_name_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = crow(&[
        "discover",
        "--source", p(&tmp.path().join("missing.cef")),
        "--target", p(&tmp.path().join("missing.cef")),
        "--num-target-classes", "3",
        "--out", p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage load"));

    let data = tmp.path().join("data");
    ok(&["synth", "--preset", "bimodal-overlap", "--out", p(&data)]);
    // More prototypes than target samples fails inside clustering.
    let out = crow(&[
        "discover",
        "--source", p(&data.join("source.cef")),
        "--target", p(&data.join("target.cef")),
        "--num-target-classes", "100000",
        "--out", p(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage cluster"));
}

#[test]
fn auxiliary_subcommands_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--preset", "bimodal-overlap", "--out", p(&data)]);
    let source = data.join("source.cef");
    let target = data.join("target.cef");
    let truth = data.join("truth.csv");

    let m = tmp.path().join("match");
    let summary = ok(&["match-only", "--source", p(&source), "--target", p(&target), "--num-target-classes", "5", "--out", p(&m)]);
    assert!(summary.contains("unseen_prototypes="));
    let matched = read_json(&m.join("match.json"));
    assert_eq!(matched["cooccurrence"].as_array().unwrap().len(), 5);
    assert!(m.join("target_prototypes.cef").exists());

    let e = tmp.path().join("estimate");
    let summary = ok(&["estimate-k", "--source", p(&source), "--target", p(&target), "--k-min", "3", "--k-max", "6", "--out", p(&e)]);
    assert!(summary.starts_with("estimated_k="));
    assert_eq!(read_json(&e.join("estimate.json"))["candidates"].as_array().unwrap().len(), 4);

    let k = tmp.path().join("kmeans");
    let summary = ok(&["baseline-kmeans", "--target", p(&target), "--truth", p(&truth), "--num-target-classes", "5", "--out", p(&k)]);
    assert!(summary.starts_with("clustering_accuracy="));
    assert!(k.join("clusters.csv").exists());

    let s = tmp.path().join("simple");
    let summary = ok(&[
        "baseline-simple",
        "--source", p(&source),
        "--target", p(&target),
        "--truth", p(&truth),
        "--num-target-classes", "5",
        "--entropy-threshold", "0.5",
        "--iters", "100",
        "--out", p(&s),
    ]);
    assert!(summary.starts_with("h_score="), "{summary}");
    let report = read_json(&s.join("run_report.json"));
    assert_eq!(report["method"], "simple");
    assert_eq!(report["entropy_threshold"], 0.5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--preset", "bimodal-overlap", "--out", p(&data)]);
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"tau": 0.4, "iterations": 50, "seed": 9}"#).unwrap();
    let out = tmp.path().join("run");
    ok(&[
        "discover",
        "--source", p(&data.join("source.cef")),
        "--target", p(&data.join("target.cef")),
        "--num-target-classes", "5",
        "--config", p(&config),
        "--seed", "4",
        "--out", p(&out),
    ]);
    let invocation = read_json(&out.join("invocation.json"));
    assert_eq!(invocation["config"]["tau"], 0.4);
    assert_eq!(invocation["config"]["iterations"], 50);
    assert_eq!(invocation["seed"], 4);

    fs::write(&config, r#"{"tua": 0.4}"#).unwrap();
    let bad = crow(&["discover", "--source", "s", "--target", "t", "--num-target-classes", "5", "--config", p(&config), "--out", "o"]);
    assert_eq!(bad.status.code(), Some(2));
}
