//! End-to-end runs of the `cutpaste` binary with file-based handoffs.

use std::path::Path;
use std::process::{Command, Output};

fn cutpaste(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cutpaste")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cutpaste(args);
    assert!(out.status.success(), "cutpaste {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOY: &str = r#"{"size": 32, "labeled": 4, "unlabeled": 6, "test": 3, "radius": [2.0, 4.0]}"#;
const TRAIN: &str =
    r#"{"epochs": 3, "warmup_epochs": 1, "steps_per_epoch": 2, "labeled_batch": 2, "synthetic_batch": 2}"#;

#[test]
fn subcommands_compose_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("toy.json"), TOY);
    write(&d.join("train.json"), TRAIN);
    let data = d.join("data");
    ok(&["toygen", "--config", p(&d.join("toy.json")), "--out", p(&data)]);
    for f in ["lab.jsonl", "unl.jsonl", "tst.jsonl", "sealed/unlabeled_truth.jsonl"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let (lab, unl, tst) = (data.join("lab.jsonl"), data.join("unl.jsonl"), data.join("tst.jsonl"));

    let matches = d.join("matches.jsonl");
    ok(&["match", "--labeled", p(&lab), "--unlabeled", p(&unl), "--out", p(&matches), "--k", "3"]);
    let rows: Vec<serde_json::Value> =
        std::fs::read_to_string(&matches).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["candidates"].as_array().unwrap().len() == 3));

    let synth = d.join("synth");
    ok(&[
        "--seed",
        "4",
        "synth",
        "--labeled",
        p(&lab),
        "--unlabeled",
        p(&unl),
        "--matches",
        p(&matches),
        "--out",
        p(&synth),
    ]);
    assert!(synth.join("synth.jsonl").exists());
    assert!(synth.join("provenance.jsonl").exists());

    let run = d.join("run");
    ok(&[
        "--seed",
        "1",
        "--deterministic",
        "train",
        "--config",
        p(&d.join("train.json")),
        "--labeled",
        p(&lab),
        "--unlabeled",
        p(&unl),
        "--out",
        p(&run),
    ]);
    for f in ["params.cpt", "params.json", "teacher.cpt", "log.jsonl", "config.json", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 1);
    assert_eq!(resolved["lambda_u"], 0.01);
    let run_info: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_info["inputs_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(run.join("log.jsonl")).unwrap().lines().count(), 3);

    let ev = d.join("eval");
    ok(&["eval", "--params", p(&run.join("params.cpt")), "--test", p(&tst), "--out", p(&ev), "--save-maps"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for k in ["auc_pr", "f1", "jaccard", "threshold", "n_images", "n_pixels"] {
        assert!(m.get(k).is_some(), "{k}");
    }
    assert_eq!(m["n_images"], 3);
    assert_eq!(m["n_pixels"], 3 * 32 * 32);
    assert!(ev.join("maps/tst-0000_prob.png").exists());
}

#[test]
fn gradcheck_prints_json_report() {
    let out = ok(&["gradcheck", "--params", "50"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let terms = report["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 4);
    for t in terms {
        assert!(t["max_rel_error"].as_f64().unwrap() < 1e-4, "{t}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("bad.json"), r#"{"lambda_u": -1}"#);
    write(&d.join("typo.json"), r#"{"lamda_u": 0.1}"#);
    write(&d.join("toy.json"), TOY);
    ok(&["toygen", "--config", p(&d.join("toy.json")), "--out", p(&d.join("data"))]);
    let lab = d.join("data/lab.jsonl");

    for cfg in ["bad.json", "typo.json"] {
        let out = cutpaste(&["train", "--config", p(&d.join(cfg)), "--labeled", p(&lab), "--out", p(&d.join("r"))]);
        assert_eq!(out.status.code(), Some(1), "{cfg}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("lambda_u") || err.contains("lamda_u"), "{err}");
    }
    assert_eq!(cutpaste(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cutpaste(&["--help"]).status.code(), Some(0));

    // A readable manifest pointing at a missing file is a runtime failure.
    write(&d.join("missing.jsonl"), "{\"image\":\"nope.png\",\"mask\":\"nope_mask.png\",\"id\":\"n\"}\n");
    let out = cutpaste(&["train", "--labeled", p(&d.join("missing.jsonl")), "--out", p(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(2));

    // Sealed ground truth is refused outright.
    let out =
        cutpaste(&["train", "--labeled", p(&d.join("data/sealed/unlabeled_truth.jsonl")), "--out", p(&d.join("r"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_matrix_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(&d.join("toy.json"), r#"{"size": 16, "labeled": 3, "unlabeled": 3, "test": 2, "radius": [2.0, 3.0]}"#);
    ok(&["toygen", "--config", p(&d.join("toy.json")), "--out", p(&d.join("data"))]);
    write(
        &d.join("matrix.json"),
        r#"{"base": {"epochs": 2, "warmup_epochs": 1, "steps_per_epoch": 1, "labeled_batch": 2, "synthetic_batch": 2},
            "runs": [{"name": "supervised", "overrides": {"lambda_u": 0.0, "variant": "none"}},
                     {"name": "ce", "overrides": {"variant": "ce"}}],
            "seeds": [0, 1]}"#,
    );
    let data = d.join("data");
    let table = ok(&[
        "experiment",
        "--matrix",
        p(&d.join("matrix.json")),
        "--labeled",
        p(&data.join("lab.jsonl")),
        "--unlabeled",
        p(&data.join("unl.jsonl")),
        "--test",
        p(&data.join("tst.jsonl")),
        "--out",
        p(&d.join("exp")),
    ]);
    assert_eq!(table.lines().count(), 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("exp/report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
    assert_eq!(report["summaries"][1]["per_seed_jaccard"].as_array().unwrap().len(), 2);
}
