//! End-to-end runs of the `hipline` binary on small datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hipline::config::{Precision, RunConfig};
use hipline::nnet::{load_checkpoint, save_checkpoint};
use hipline::phantom::SplitCounts;
use hipline::pipeline::{Stage, StageModelRef};
use serde_json::Value;
use tempfile::TempDir;

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        output_dir: root.join("out"),
        splits: SplitCounts {
            train: 80,
            val: 40,
            test: 40,
        },
        ..RunConfig::default()
    };
    for stage in Stage::ALL {
        cfg.stages.get_mut(stage).training.epochs = 1;
    }
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn hipline(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hipline"))
        .arg("--config")
        .arg(config)
        .arg("--quiet")
        .args(args)
        .env_remove("HIPLINE_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_hipline"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_hipline"))
        .arg("launch")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_hipline"))
        .args(["train", "--stage", "femur"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_and_data_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(hipline(&bad, &["generate"]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    let out = hipline(&cfg, &["train", "--stage", "frontal"]);
    assert_eq!(out.status.code(), Some(2), "training without a dataset");
    ok(hipline(&cfg, &["generate"]));
    let out = hipline(&cfg, &["eval", "full"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing frontal checkpoint"));
}

#[test]
fn non_finite_model_output_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    let path = write_config(dir.path(), "cfg.json", &cfg);
    ok(hipline(&path, &["generate"]));
    ok(hipline(&path, &["train", "--stage", "frontal"]));
    let ckpt_path = dir.path().join("out/checkpoints/frontal.ckpt");
    let mut ckpt = load_checkpoint(&ckpt_path).unwrap();
    ckpt.blob.iter_mut().for_each(|v| *v = f32::NAN);
    save_checkpoint(&ckpt_path, &ckpt).unwrap();
    cfg.pipeline.bounding = StageModelRef::oracle();
    cfg.pipeline.metal = StageModelRef::oracle();
    cfg.pipeline.fracture = StageModelRef::oracle();
    let path = write_config(dir.path(), "cfg.json", &cfg);
    let out = hipline(&path, &["eval", "full"]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generation_is_byte_identical_for_one_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    ok(hipline(
        &cfg,
        &[
            "generate",
            "--data-dir",
            dir.path().join("a").to_str().unwrap(),
        ],
    ));
    ok(hipline(
        &cfg,
        &[
            "generate",
            "--data-dir",
            dir.path().join("b").to_str().unwrap(),
        ],
    ));
    for f in ["manifest.jsonl", "dataset.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 80, "one line per two-hip case");
    let images = std::fs::read_dir(dir.path().join("a/images"))
        .unwrap()
        .count();
    assert_eq!(images, 160);
    let case: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert!(case["hips"][0]["image_path"]
        .as_str()
        .unwrap()
        .starts_with("images/"));

    let other = RunConfig {
        seed: 12,
        ..small_config(dir.path())
    };
    let other = write_config(dir.path(), "other.json", &other);
    ok(hipline(
        &other,
        &[
            "generate",
            "--data-dir",
            dir.path().join("c").to_str().unwrap(),
        ],
    ));
    let c = std::fs::read(dir.path().join("c/manifest.jsonl")).unwrap();
    assert_ne!(c, manifest.as_bytes());
}

#[test]
fn data_dir_comes_from_env_unless_flag_given() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let run = |extra: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_hipline"))
            .arg("--config")
            .arg(&cfg)
            .arg("-q")
            .args(extra)
            .env("HIPLINE_DATA_DIR", &env_dir)
            .output()
            .unwrap()
    };
    ok(run(&["generate"]));
    assert!(env_dir.join("manifest.jsonl").exists());
    ok(run(&["generate", "--data-dir", flag_dir.to_str().unwrap()]));
    assert!(flag_dir.join("manifest.jsonl").exists());
}

#[test]
fn zero_prevalence_warns_and_labels_everything_negative() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.phantom.fracture_prevalence = 0.0;
    cfg.phantom.test_fracture_prevalence = 0.0;
    let path = write_config(dir.path(), "cfg.json", &cfg);
    let out = ok(hipline(&path, &["generate"]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: fracture prevalence is zero"));
    let manifest = std::fs::read_to_string(dir.path().join("out/data/manifest.jsonl")).unwrap();
    for line in manifest.lines() {
        let case: Value = serde_json::from_str(line).unwrap();
        for hip in case["hips"].as_array().unwrap() {
            assert_eq!(hip["fracture"], false);
            assert_eq!(hip["label"]["fracture"], false);
        }
    }
}

#[test]
fn resume_with_no_remaining_epochs_reproduces_the_checkpoint() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    ok(hipline(&cfg, &["generate"]));
    ok(hipline(&cfg, &["train", "--stage", "frontal"]));
    let ckpt = dir.path().join("out/checkpoints/frontal.ckpt");
    let saved = dir.path().join("first.ckpt");
    std::fs::copy(&ckpt, &saved).unwrap();
    ok(hipline(
        &cfg,
        &[
            "train",
            "--stage",
            "frontal",
            "--resume",
            saved.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&saved).unwrap()
    );
    let log = read_json(&dir.path().join("out/checkpoints/frontal.training.json"));
    assert_eq!(log["history"].as_array().unwrap().len(), 0);

    let out = hipline(
        &cfg,
        &[
            "train",
            "--stage",
            "metal",
            "--resume",
            saved.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "stage mismatch is refused");
}

#[test]
fn zero_learning_rate_records_a_flat_loss_curve() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.precision = Precision::F64;
    let t = &mut cfg.stages.frontal.training;
    t.learning_rate = 0.0;
    t.epochs = 3;
    t.batch_size = 1000;
    t.augmentation = None;
    t.dropout_rate = 0.0;
    let path = write_config(dir.path(), "cfg.json", &cfg);
    ok(hipline(&path, &["generate"]));
    ok(hipline(&path, &["train", "--stage", "frontal"]));
    let log = read_json(&dir.path().join("out/checkpoints/frontal.training.json"));
    let losses: Vec<f64> = log["history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["train_loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    for l in &losses[1..] {
        assert!(
            (l - losses[0]).abs() <= 1e-9 * losses[0].abs(),
            "{losses:?}"
        );
    }
}

#[test]
fn oracle_models_score_perfectly() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    for stage in Stage::ALL {
        *cfg.pipeline.model_mut(stage) = StageModelRef::oracle();
    }
    let path = write_config(dir.path(), "cfg.json", &cfg);
    ok(hipline(&path, &["generate"]));
    ok(hipline(&path, &["eval", "full"]));
    ok(hipline(&path, &["eval", "balanced"]));
    for protocol in ["full", "balanced"] {
        let eval_dir = dir.path().join(format!("out/eval/test-{protocol}"));
        let m = read_json(&eval_dir.join("metrics.json"));
        let f = &m["fracture"];
        assert_eq!(f["auc"], 1.0);
        let points = f["operating_points"].as_array().unwrap();
        assert_eq!(points.len(), 2);
        for op in points {
            for name in ["accuracy", "precision", "recall", "f1"] {
                let e = &op["intervals"][name];
                assert_eq!(e["value"], 1.0, "{protocol} {name}");
                assert_eq!(e["upper"], 1.0, "{protocol} {name}");
                assert!(e["lower"].as_f64().unwrap() < 1.0);
            }
        }
        for f in ["roc.csv", "roc.svg", "table.txt"] {
            assert!(eval_dir.join(f).exists());
        }
        if protocol == "balanced" {
            assert_eq!(f["prevalence"], 0.5);
            assert_eq!(
                2 * f["positives"].as_u64().unwrap(),
                f["evaluated"].as_u64().unwrap()
            );
        }
    }
    let full = read_json(&dir.path().join("out/eval/test-full/metrics.json"));
    let balanced = read_json(&dir.path().join("out/eval/test-balanced/metrics.json"));
    assert_eq!(
        full["fracture"]["positives"],
        balanced["fracture"]["positives"]
    );
}

#[test]
fn full_workflow_reruns_byte_for_byte_in_f64() {
    let dir = TempDir::new().unwrap();
    let runs: Vec<PathBuf> = ["first", "second"]
        .iter()
        .map(|name| {
            let root = dir.path().join(name);
            std::fs::create_dir_all(&root).unwrap();
            let mut cfg = RunConfig {
                precision: Precision::F64,
                ..small_config(&root)
            };
            // enough for the gates to pass some validation hips
            cfg.stages.frontal.training.epochs = 3;
            cfg.stages.metal.training.epochs = 2;
            let path = write_config(&root, "cfg.json", &cfg);
            ok(hipline(&path, &["generate"]));
            for stage in ["frontal", "bounding", "metal", "fracture"] {
                ok(hipline(&path, &["train", "--stage", stage]));
            }
            ok(hipline(&path, &["run", "--split", "test"]));
            ok(hipline(&path, &["eval", "full"]));
            ok(hipline(&path, &["eval", "balanced"]));
            root.join("out")
        })
        .collect();
    let files = [
        "data/manifest.jsonl",
        "checkpoints/frontal.ckpt",
        "checkpoints/bounding.ckpt",
        "checkpoints/metal.ckpt",
        "checkpoints/fracture.ckpt",
        "checkpoints/fracture.training.json",
        "checkpoints/metal.threshold.json",
        "runs/test/dispositions.jsonl",
        "eval/test-full/metrics.json",
        "eval/test-full/roc.csv",
        "eval/test-balanced/metrics.json",
    ];
    for f in files {
        let a = std::fs::read(runs[0].join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let metrics = read_json(&runs[0].join("eval/test-full/metrics.json"));
    let frac_sha = metrics["models"][3]["checkpoint_sha256"]
        .as_str()
        .unwrap()
        .to_string();
    let log = read_json(&runs[0].join("checkpoints/fracture.training.json"));
    assert_eq!(log["checkpoint_sha256"].as_str().unwrap(), frac_sha);
    assert!(metrics["gates"].is_object());

    // every experiment line differs only in its timing field
    let strip = |p: &Path| -> Vec<Value> {
        std::fs::read_to_string(p.join("experiments.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("timing");
                v.as_object_mut().unwrap().remove("artifacts");
                v.as_object_mut().unwrap().remove("config");
                v
            })
            .collect()
    };
    assert_eq!(strip(&runs[0]), strip(&runs[1]));
}

#[test]
fn eval_refuses_a_checkpoint_from_another_dataset() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_config(dir.path());
    let path = write_config(dir.path(), "cfg.json", &cfg);
    ok(hipline(&path, &["generate"]));
    ok(hipline(&path, &["train", "--stage", "frontal"]));
    cfg.seed = 99;
    for stage in [Stage::Bounding, Stage::Metal, Stage::Fracture] {
        *cfg.pipeline.model_mut(stage) = StageModelRef::oracle();
    }
    let path = write_config(dir.path(), "cfg.json", &cfg);
    ok(hipline(&path, &["generate"]));
    let out = hipline(&path, &["eval", "full"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trained on dataset"));
}

fn grid_file(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn grid_search_ranks_points_and_matches_train() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    ok(hipline(&cfg, &["generate"]));
    ok(hipline(&cfg, &["train", "--stage", "frontal"]));
    let trained = read_json(&dir.path().join("out/checkpoints/frontal.training.json"));

    let one = grid_file(
        dir.path(),
        "one.json",
        r#"{"training.learning_rate": [0.001]}"#,
    );
    ok(hipline(
        &cfg,
        &["grid-search", "--stage", "frontal", "--grid", &one],
    ));
    let report = read_json(&dir.path().join("out/grid/frontal.json"));
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["history"], trained["history"]);

    let two = grid_file(
        dir.path(),
        "two.json",
        r#"{"training.learning_rate": [0.001, 0.01], "training.batch_size": [8, 32]}"#,
    );
    ok(hipline(
        &cfg,
        &["grid-search", "--stage", "frontal", "--grid", &two],
    ));
    let report = read_json(&dir.path().join("out/grid/frontal.json"));
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    let mut seen = std::collections::BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["rank"].as_u64().unwrap() as usize, i + 1);
        let last = r["history"].as_array().unwrap().last().unwrap();
        assert_eq!(r["score"], last["val_auc"]);
        seen.insert(r["point"]["params"].to_string());
    }
    assert_eq!(seen.len(), 4);
    for pair in records.windows(2) {
        let (a, b) = (
            pair[0]["score"].as_f64().unwrap(),
            pair[1]["score"].as_f64().unwrap(),
        );
        assert!(
            a > b
                || (a == b
                    && pair[0]["point"]["setup_hash"].as_str()
                        < pair[1]["point"]["setup_hash"].as_str())
        );
    }
}

#[test]
fn grid_ties_are_ordered_by_setup_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    ok(hipline(&cfg, &["generate"]));
    // the architecture dropout is overridden by the training dropout, so
    // these points train identically
    let tie = grid_file(
        dir.path(),
        "tie.json",
        r#"{"arch.dropout_rate": [0.1, 0.3, 0.5]}"#,
    );
    ok(hipline(
        &cfg,
        &["grid-search", "--stage", "frontal", "--grid", &tie],
    ));
    let report = read_json(&dir.path().join("out/grid/frontal.json"));
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    let hashes: Vec<&str> = records
        .iter()
        .map(|r| r["point"]["setup_hash"].as_str().unwrap())
        .collect();
    assert!(records.iter().all(|r| r["score"] == records[0]["score"]));
    assert!(hashes.windows(2).all(|w| w[0] < w[1]), "{hashes:?}");
}

#[test]
fn empty_or_unknown_grids_are_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "cfg.json", &small_config(dir.path()));
    ok(hipline(&cfg, &["generate"]));
    for (name, body) in [
        ("empty.json", "{}"),
        ("hollow.json", r#"{"training.learning_rate": []}"#),
        ("unknown.json", r#"{"training.momentum": [0.9]}"#),
    ] {
        let g = grid_file(dir.path(), name, body);
        let out = hipline(&cfg, &["grid-search", "--stage", "frontal", "--grid", &g]);
        assert_eq!(out.status.code(), Some(2), "{name}");
    }
    assert!(!dir.path().join("out/grid/frontal.json").exists());
}
