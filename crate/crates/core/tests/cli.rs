mod common;

use std::path::Path;
use std::process::{Command, Output};

use nla_slr::eval::EvalReport;
use nla_slr::trainer::TrainConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nla-slr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(&d.join("spec.json"), &common::tiny_spec(2));
    let cfg = TrainConfig {
        epochs: 1,
        ..common::tiny_train_config()
    };
    std::fs::write(d.join("train.toml"), toml::to_string(&cfg).unwrap()).unwrap();

    let data = d.join("data");
    let run_dir = d.join("run");
    ok(&[
        "gen-data",
        "--spec",
        p(&d.join("spec.json")),
        "--out",
        p(&data),
    ]);
    assert!(data.join("manifest.json").exists());
    ok(&[
        "train",
        "--config",
        p(&d.join("train.toml")),
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--seed",
        "3",
    ]);
    let ckpt = run_dir.join("checkpoint.tnc");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let report1 = d.join("r1.json");
    let report3 = d.join("r3.json");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--crops",
        "1",
        "--report",
        p(&report1),
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--crops",
        "3",
        "--report",
        p(&report3),
    ]);
    let r1: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report1).unwrap()).unwrap();
    let r3: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report3).unwrap()).unwrap();
    assert_eq!((r1.crops, r3.crops), (1, 3));
    assert_eq!(r1.instances.len(), 12);

    let small = d.join("small.tnc");
    ok(&[
        "export",
        "--checkpoint",
        p(&ckpt),
        "--inference-only",
        "--out",
        p(&small),
    ]);
    let report_small = d.join("rs.json");
    ok(&[
        "eval",
        "--checkpoint",
        p(&small),
        "--data",
        p(&data),
        "--crops",
        "3",
        "--report",
        p(&report_small),
    ]);
    let rs: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&report_small).unwrap()).unwrap();
    assert_eq!(rs, r3);

    let part = d.join("part.json");
    ok(&[
        "visign-partition",
        "--baseline-report",
        p(&report1),
        "--lexicon",
        p(&data.join("lexicon.vec")),
        "--out",
        p(&part),
    ]);
    let part: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&part).unwrap()).unwrap();
    let counts = part["counts"].as_object().unwrap();
    assert_eq!(
        counts.values().map(|v| v.as_u64().unwrap()).sum::<u64>(),
        12
    );

    let out = ok(&[
        "inspect-labels",
        "--lexicon",
        p(&data.join("lexicon.vec")),
        "--gloss",
        "gloss_00",
        "--epsilon",
        "0.2",
        "--tau",
        "0.5",
    ]);
    let labels: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let probs: Vec<f64> = labels["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["prob"].as_f64().unwrap())
        .collect();
    assert_eq!(probs.len(), 6);
    assert!((probs[0] - 0.8).abs() < 1e-12);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // The similar-pair partner of class 0 gets the largest share.
    assert!(probs[2..].iter().all(|&q| q < probs[1]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"epochs": 1, "no_such_key": 2}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        p(&d.join("bad.json")),
        "--data",
        p(d),
        "--out",
        p(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let lex = d.join("lex.vec");
    std::fs::write(&lex, "2 2\na 1 0\nb 0 1\n").unwrap();
    let out = run(&[
        "inspect-labels",
        "--lexicon",
        p(&lex),
        "--gloss",
        "a",
        "--epsilon",
        "0.2",
        "--tau",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "inspect-labels",
        "--lexicon",
        p(&lex),
        "--gloss",
        "zzz",
        "--epsilon",
        "0.2",
        "--tau",
        "0.5",
    ]);
    assert_eq!(out.status.code(), Some(3));

    std::fs::write(d.join("ok.json"), "{}").unwrap();
    let out = run(&[
        "train",
        "--config",
        p(&d.join("ok.json")),
        "--data",
        p(&d.join("missing")),
        "--out",
        p(&d.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&[
        "eval",
        "--checkpoint",
        "x",
        "--data",
        "y",
        "--crops",
        "2",
        "--report",
        "z",
    ]);
    assert!(!out.status.success());
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_json(&d.join("spec.json"), &common::tiny_spec(2));
    let data = d.join("data");
    ok(&[
        "gen-data",
        "--spec",
        p(&d.join("spec.json")),
        "--out",
        p(&data),
    ]);
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e300,
        ..common::tiny_train_config()
    };
    write_json(&d.join("cfg.json"), &cfg);
    let out_dir = d.join("run");
    let out = run(&[
        "train",
        "--config",
        p(&d.join("cfg.json")),
        "--data",
        p(&data),
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("nonfinite.json")).unwrap())
            .unwrap();
    assert!(dump["batch"].is_u64());
    assert!(!dump["samples"].as_array().unwrap().is_empty());
}
