use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn regformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regformer"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = regformer(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(dir: &Path, args: &[&str], category: &str) -> String {
    let out = regformer(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let prefix = format!("ERROR:{category}:");
    assert!(err.lines().any(|l| l.starts_with(&prefix)), "expected {prefix} in {err}");
    err
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn loss_trace(stdout: &str) -> Vec<f64> {
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("epoch,loss"));
    lines.map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect()
}

#[test]
fn gen_data_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "5", "gen-data", "a"]);
    ok(d, &["--seed", "5", "gen-data", "b"]);
    let a = files(&d.join("a"));
    assert_eq!(a, files(&d.join("b")));
    let count = |sub: &str| fs::read_dir(d.join("a").join(sub)).unwrap().count();
    assert_eq!(count("features"), 24);
    assert_eq!(count("detections"), 24);
    assert!(d.join("a/manifest.json").is_file() && d.join("a/gt.json").is_file());
    ok(d, &["--seed", "6", "gen-data", "c"]);
    assert_ne!(a, files(&d.join("c")));
}

#[test]
fn gen_data_on_tiny_grid_is_a_generation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails_with(tmp.path(), &["gen-data", "x", "--grid-h", "2", "--grid-w", "2"], "generation");
    assert!(err.contains("larger grid"));
}

#[test]
fn train_classify_detect_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "1", "gen-data", "data"]);

    let trace = loss_trace(&ok(d, &["--seed", "1", "train", "data", "default.rgfc"]));
    assert_eq!(trace.len(), 6);
    assert!(trace[5] < trace[0], "{trace:?}");

    let args = ["--seed", "1", "--threads", "2", "train", "data", "m.rgfc", "--lr", "1", "--batch-size", "1"];
    let first = ok(d, &args);
    assert_eq!(first, ok(d, &args));
    assert_eq!(fs::read(d.join("m.rgfc")).unwrap().len(), fs::read(d.join("default.rgfc")).unwrap().len());
    let trace = loss_trace(&first);
    assert!(trace[5] < 0.5 * trace[0], "{trace:?}");

    let cls: Value = serde_json::from_str(&ok(d, &["classify", "m.rgfc", "data/features/img_0000.rgft", "data/bank.rgft"])).unwrap();
    let scores = cls["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 4);
    for row in scores {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 3);
        assert!(row.iter().all(|v| v.as_f64().unwrap() > 0.0 && v.as_f64().unwrap() < 1.0));
    }

    ok(d, &["--threads", "3", "detect", "m.rgfc", "--dataset", "data", "--out", "preds.jsonl"]);
    let lines: Vec<Value> = fs::read_to_string(d.join("preds.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    for l in &lines {
        for key in ["image_id", "human_box", "object_box", "object_class", "action", "score", "factors"] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
    }

    let single = ok(d, &["detect", "m.rgfc", "data/features/img_0003.rgft", "data/bank.rgft", "data/detections/img_0003.json"]);
    let from_dataset: Vec<String> = fs::read_to_string(d.join("preds.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| l.contains("\"img_0003\""))
        .map(String::from)
        .collect();
    assert_eq!(single.lines().map(String::from).collect::<Vec<_>>(), from_dataset);

    let out = regformer(d, &["eval", "preds.jsonl", "data"]);
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let map = report["mAP_full"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mAP full"));

    let subset: Value = serde_json::from_str(&ok(d, &["eval", "preds.jsonl", "data/gt.json", "--classes", "0:1,1:2"])).unwrap();
    assert!(subset["classes"].as_array().unwrap().len() <= 2);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "data", "--n-images", "8"]);
    let gt: Value = serde_json::from_str(&fs::read_to_string(d.join("data/gt.json")).unwrap()).unwrap();
    let mut lines = String::new();
    for img in gt["images"].as_array().unwrap() {
        for a in img["annotations"].as_array().unwrap() {
            let rec = serde_json::json!({
                "image_id": img["image_id"],
                "human_box": a["human_box"],
                "object_box": a["object_box"],
                "object_class": a["object_class"],
                "action": a["action"],
                "score": 0.9,
                "factors": {"s_a": 0.9, "r_ho": 1.0, "det": 1.0},
            });
            lines.push_str(&rec.to_string());
            lines.push('\n');
        }
    }
    fs::write(d.join("p.jsonl"), lines).unwrap();
    let report: Value = serde_json::from_str(&ok(d, &["eval", "p.jsonl", "data", "--rare-threshold", "1"])).unwrap();
    assert_eq!(report["mAP_full"].as_f64(), Some(1.0));
    assert_eq!(report["mAP_rare"], Value::Null);
}

#[test]
fn config_file_sets_defaults_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.toml"), "seed = 4\n[data]\nn_images = 3\n[paths]\ndata_dir = \"data\"\ncheckpoint = \"m.rgfc\"\n[train]\nepochs = 2\n").unwrap();
    ok(d, &["--config", "run.toml", "gen-data", "data"]);
    assert_eq!(fs::read_dir(d.join("data/features")).unwrap().count(), 3);
    assert_eq!(loss_trace(&ok(d, &["--config", "run.toml", "train"])).len(), 3);
    assert!(d.join("m.rgfc").is_file());

    fs::write(d.join("bad.toml"), "[detector]\nlamda = 2.0\n").unwrap();
    let err = fails_with(d, &["--config", "bad.toml", "eval", "a", "b"], "config");
    assert!(err.contains("lamda"));
    fails_with(d, &["--config", "missing.toml", "eval", "a", "b"], "io");
}

#[test]
fn argument_and_io_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "data", "--n-images", "2"]);
    fails_with(d, &["train", "data", "m.rgfc", "--epochs", "0"], "argument");
    let err = fails_with(d, &["train", "nowhere", "m.rgfc"], "io");
    assert!(err.contains("nowhere"));
    fails_with(d, &["train"], "argument");
    fails_with(d, &["frobnicate"], "argument");
    fails_with(d, &["--threads", "0", "bench"], "argument");
    fails_with(d, &["eval", "nope.jsonl", "data"], "io");
    fails_with(d, &["eval", "x", "data", "--classes", "1-2"], "argument");
    fails_with(d, &["bench", "--strategies", "fastest"], "argument");
    let help = regformer(d, &["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("gen-data"));
}

#[test]
fn bench_writes_json_and_csv_with_exact_counters() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("b.toml"), "[bench]\ngrid_h = 4\ngrid_w = 4\nd_v = 8\nd_t = 8\n").unwrap();
    let stdout = ok(
        d,
        &["--config", "b.toml", "bench", "--pairs", "1,6", "--iterations", "2", "--warmup", "1", "--strategies", "regformer,mldecoder_crop,regformer_naive", "--out-json", "r.json", "--out-csv", "r.csv"],
    );
    assert_eq!(stdout, fs::read_to_string(d.join("r.csv")).unwrap());
    let rows: Vec<Value> = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    let counts = |s: &str, p: u64| {
        let r = rows.iter().find(|r| r["strategy"] == s && r["pair_count"] == p).unwrap();
        (r["grounding_passes"].as_u64().unwrap(), r["attention_passes"].as_u64().unwrap(), r["decoder_forwards"].as_u64().unwrap())
    };
    assert_eq!(counts("regformer", 6), (1, 1, 6));
    assert_eq!(counts("regformer_naive", 6), (6, 6, 6));
    assert_eq!(counts("mldecoder_crop", 6), (0, 6, 6));
    let order: Vec<(String, u64)> = rows.iter().map(|r| (r["strategy"].as_str().unwrap().to_string(), r["pair_count"].as_u64().unwrap())).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
}
