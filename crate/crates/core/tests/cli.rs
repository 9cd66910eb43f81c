mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use symlearn::data::write_idx;

fn symlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symlearn"))
        .args(args)
        .env_remove("SYMLEARN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// A tiny 10-class IDX dataset on 6x6 grids.
fn fixture_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let train = common::random_dataset(120, 6, 10, 1);
    let test = common::random_dataset(40, 6, 10, 2);
    write_idx(
        &train,
        &dir.path().join("train-images-idx3-ubyte"),
        &dir.path().join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    write_idx(
        &test,
        &dir.path().join("t10k-images-idx3-ubyte"),
        &dir.path().join("t10k-labels-idx1-ubyte"),
    )
    .unwrap();
    dir
}

fn write_json(path: &Path, value: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn group_exports_match_hand_computed_bases() {
    let out = symlearn(&["group", "--name", "rot90", "--n", "2"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["name"], "rot90");
    assert_eq!(v["dim"], 4);
    assert_eq!(v["basis"], json!([[0.5, 0.5, 0.5, 0.5]]));
    assert!(v.get("reynolds").is_none());

    let v = stdout_json(&symlearn(&["group", "--name", "identity", "--n", "3"]));
    assert_eq!(v["orbit_sizes"], json!([1, 1, 1, 1, 1, 1, 1, 1, 1]));

    let v = stdout_json(&symlearn(&["group", "--name", "rot90", "--n", "3"]));
    assert_eq!(v["orbit_sizes"], json!([4, 4, 1]));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("g.json");
    let out = symlearn(&["group", "--name", "rot90", "--n", "2", "--reynolds", "-o", p(&file)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(v["reynolds"], json!(vec![vec![0.25; 4]; 4]));
}

#[test]
fn unknown_group_exits_with_usage_code() {
    let out = symlearn(&["group", "--name", "shear", "--n", "3"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("shear"));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [None, Some("group"), Some("prepare"), Some("train"), Some("eval"), Some("compare")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        assert_eq!(code(&symlearn(&args)), 0, "{args:?}");
    }
}

#[test]
fn prepare_writes_manifest_and_is_reproducible() {
    let data = fixture_dir();
    let out_dir = tempfile::tempdir().unwrap();
    let run = |variant: &str, seed: &str| {
        symlearn(&[
            "--seed", seed, "prepare", "--variant", variant, "--data-dir", p(data.path()), "--output-dir",
            p(out_dir.path()),
        ])
    };

    assert_eq!(code(&run("permuted", "5")), 0);
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(out_dir.path().join("permuted/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["variant"], "permuted");
    assert_eq!(manifest["seed"], 5);

    assert_eq!(code(&run("rotated", "5")), 0);
    let rotated = out_dir.path().join("rotated");
    let manifest: Value = serde_json::from_slice(&std::fs::read(rotated.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dropped_classes"], json!([6, 9]));
    assert_eq!(manifest["class_remap"], json!([0, 1, 2, 3, 4, 5, 7, 8]));
    assert_eq!(manifest["train_count"], 96);

    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "manifest.json"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(rotated.join(f)).unwrap()).collect();
    assert_eq!(code(&run("rotated", "5")), 0);
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(rotated.join(f)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn prepare_reports_missing_sources_as_io_failures() {
    let empty = tempfile::tempdir().unwrap();
    let out = symlearn(&["prepare", "--variant", "plain", "--data-dir", p(empty.path())]);
    assert_eq!(code(&out), 3);
}

fn train_config(data: &Path, out: &Path, model: Value, seeds: Value) -> Value {
    json!({
        "data": {"dir": data},
        "variant": {"variant": "flipped", "seed": 1},
        "model": model,
        "training": {"batch_size": 16, "max_epochs": 3},
        "seeds": seeds,
        "output_dir": out,
    })
}

#[test]
fn train_writes_one_set_of_outputs_per_seed() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("runs");
    let cfg = write_json(
        &work.path().join("cfg.json"),
        &train_config(data.path(), &out, json!({"kind": "invariantnet", "hidden_width": 8}), json!([0, 1, 2])),
    );
    let res = symlearn(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let mut trajectories: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".trajectory.csv"))
        .collect();
    trajectories.sort();
    assert_eq!(
        trajectories,
        [
            "invariantnet-flipped-seed0.trajectory.csv",
            "invariantnet-flipped-seed1.trajectory.csv",
            "invariantnet-flipped-seed2.trajectory.csv"
        ]
    );
    let csv = std::fs::read_to_string(out.join(&trajectories[0])).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_acc,p_1,p_2,p_3,wall_time_s");
    assert!(lines.count() >= 1);

    let summary: Value =
        serde_json::from_slice(&std::fs::read(out.join("invariantnet-flipped-seed1.summary.json")).unwrap()).unwrap();
    let pi: Vec<f64> = serde_json::from_value(summary["final_pi"].clone()).unwrap();
    assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(out.join("invariantnet-flipped-seed1.checkpoint.json").exists());
}

#[test]
fn global_seed_overrides_and_reproduces_runs() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let out = work.path().join("runs");
    let cfg = write_json(
        &work.path().join("cfg.json"),
        &train_config(data.path(), &out, json!({"kind": "mlp", "hidden_width": 6}), json!([0])),
    );
    let strip_time = |text: String| -> Vec<String> {
        text.lines()
            .map(|l| l.rsplit_once(',').map_or(l.to_string(), |(head, _)| head.to_string()))
            .collect()
    };
    let read = || strip_time(std::fs::read_to_string(out.join("mlp-flipped-seed9.trajectory.csv")).unwrap());
    assert_eq!(code(&symlearn(&["--seed", "9", "train", "--config", p(&cfg)])), 0);
    let first = read();
    let ckpt = std::fs::read(out.join("mlp-flipped-seed9.checkpoint.json")).unwrap();
    assert_eq!(code(&symlearn(&["--seed", "9", "train", "--config", p(&cfg)])), 0);
    assert_eq!(read(), first);
    assert_eq!(std::fs::read(out.join("mlp-flipped-seed9.checkpoint.json")).unwrap(), ckpt);
    assert!(!out.join("mlp-flipped-seed0.trajectory.csv").exists());
}

#[test]
fn bad_configs_are_usage_errors() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = train_config(data.path(), work.path(), json!({"kind": "mlp"}), json!([0]));
    cfg["learning_rate"] = json!(0.1);
    let path = write_json(&work.path().join("unknown.json"), &cfg);
    assert_eq!(code(&symlearn(&["train", "--config", p(&path)])), 2);

    let cfg = train_config(data.path(), work.path(), json!({"kind": "invariantnet", "groups": ["shear"]}), json!([0]));
    let path = write_json(&work.path().join("group.json"), &cfg);
    assert_eq!(code(&symlearn(&["train", "--config", p(&path)])), 2);

    let cfg = train_config(data.path(), work.path(), json!({"kind": "mlp"}), json!([]));
    let path = write_json(&work.path().join("seeds.json"), &cfg);
    assert_eq!(code(&symlearn(&["train", "--config", p(&path)])), 2);
}

#[test]
fn divergent_training_exits_with_numeric_code_and_keeps_partial_log() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = train_config(data.path(), work.path(), json!({"kind": "mlp", "hidden_width": 6}), json!([0]));
    cfg["training"]["adam"] = json!({"learning_rate": 1e300, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8});
    let path = write_json(&work.path().join("nan.json"), &cfg);
    let out = symlearn(&["train", "--config", p(&path)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(work.path().join("mlp-flipped-seed0.trajectory.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_acc,wall_time_s"));
}

fn train_rotnet(data: &Path, out: &Path) -> PathBuf {
    let cfg = json!({
        "data": {"dir": data},
        "variant": {"variant": "plain"},
        "model": {"kind": "rotnet", "hidden_width": 6},
        "training": {"batch_size": 16, "max_epochs": 2},
        "seeds": [0],
        "output_dir": out,
    });
    let path = write_json(&out.join("rotnet.json"), &cfg);
    assert_eq!(code(&symlearn(&["train", "--config", p(&path)])), 0);
    out.join("rotnet-plain-seed0.checkpoint.json")
}

#[test]
fn eval_reports_accuracy_and_rotnet_ignores_rotations() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let ckpt = train_rotnet(data.path(), work.path());
    let images = data.path().join("t10k-images-idx3-ubyte");
    let labels = data.path().join("t10k-labels-idx1-ubyte");
    let eval = |transform: &str| {
        let out = symlearn(&[
            "--seed", "3", "eval", "--checkpoint", p(&ckpt), "--images", p(&images), "--labels", p(&labels),
            "--transform", transform,
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        stdout_json(&out)
    };
    let none = eval("none");
    assert_eq!(none["n"], 40);
    assert_eq!(none["transform"], "none");
    assert_eq!(eval("none"), none);
    let rotated = eval("rot90");
    assert_eq!(rotated["transform"], "rot90");
    assert_eq!(rotated["accuracy"], none["accuracy"]);

    let report = work.path().join("eval.json");
    let out = symlearn(&[
        "eval", "--checkpoint", p(&ckpt), "--images", p(&images), "--labels", p(&labels), "-o", p(&report),
    ]);
    assert_eq!(code(&out), 0);
    let written: Value = serde_json::from_slice(&std::fs::read(report).unwrap()).unwrap();
    assert_eq!(written, none);
}

#[test]
fn eval_rejects_empty_and_mismatched_data() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let ckpt = train_rotnet(data.path(), work.path());

    let empty = common::random_dataset(0, 6, 1, 0);
    let (ei, el) = (work.path().join("empty-img"), work.path().join("empty-lbl"));
    write_idx(&empty, &ei, &el).unwrap();
    let out = symlearn(&["eval", "--checkpoint", p(&ckpt), "--images", p(&ei), "--labels", p(&el)]);
    assert_eq!(code(&out), 2);

    let wrong = common::random_dataset(5, 5, 3, 0);
    let (wi, wl) = (work.path().join("wrong-img"), work.path().join("wrong-lbl"));
    write_idx(&wrong, &wi, &wl).unwrap();
    let out = symlearn(&["eval", "--checkpoint", p(&ckpt), "--images", p(&wi), "--labels", p(&wl)]);
    assert_eq!(code(&out), 2);

    let out = symlearn(&[
        "eval", "--checkpoint", p(&ckpt), "--images", p(&wi), "--labels", p(&wl), "--transform", "shear",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_writes_rows_and_summaries() {
    let data = fixture_dir();
    let work = tempfile::tempdir().unwrap();
    let suite = json!({
        "data": {"dir": data.path()},
        "models": [{"kind": "mlp", "hidden_width": 6}, {"kind": "invariantnet", "hidden_width": 6}],
        "variants": [{"variant": "flipped"}],
        "training": {"batch_size": 16, "max_epochs": 2},
        "seeds": [0, 1, 2],
        "output_dir": work.path().join("suite"),
    });
    let path = write_json(&work.path().join("suite.json"), &suite);
    let out = symlearn(&["compare", "--config", p(&path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let text = std::fs::read_to_string(work.path().join("suite/compare.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap(),
        vec!["model", "variant", "test_transform", "seed", "accuracy", "std"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    let (runs, summaries): (Vec<_>, Vec<_>) = rows.iter().partition(|r| &r[3] != "mean");
    assert_eq!(runs.len(), 6);
    assert_eq!(summaries.len(), 2);
    for s in summaries {
        let accs: Vec<f64> = runs.iter().filter(|r| r[0] == s[0]).map(|r| r[4].parse().unwrap()).collect();
        let mean = accs.iter().sum::<f64>() / 3.0;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((s[4].parse::<f64>().unwrap() - mean).abs() < 1e-12);
        assert!((s[5].parse::<f64>().unwrap() - std).abs() < 1e-12);
    }
}

#[test]
fn empty_suite_is_a_usage_error() {
    let work = tempfile::tempdir().unwrap();
    let suite = json!({"models": [], "variants": [{"variant": "plain"}], "seeds": [0]});
    let path = write_json(&work.path().join("suite.json"), &suite);
    assert_eq!(code(&symlearn(&["compare", "--config", p(&path)])), 2);
}
