use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use openvad::config::Config;
use openvad::model::{Checkpoint, Model};
use openvad::rng::{make_substream, streams};
use serde_json::Value;

fn openvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openvad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = openvad(args);
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

const SMALL: &[&str] = &[
    "--train-videos", "16", "--val-videos", "8", "--test-videos", "12", "--embed-dim", "8", "--min-len", "8",
    "--max-len", "12",
];

const MODEL: &[&str] = &[
    "--hidden-size", "16", "--encoder-layers", "1", "--fusion-layers", "1", "--batch-size", "8", "--knn-n", "10",
];

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    out
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let (m, f, pr) = (data.join("manifest.jsonl"), data.join("features"), data.join("prototypes.json"));
    let mut args = vec!["train", "--manifest", p(&m), "--features", p(&f), "--prototypes", p(&pr), "--out", p(out)];
    args.extend_from_slice(MODEL);
    args.extend_from_slice(extra);
    ok(&args)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = synth(a.path());
    let db = synth(b.path());
    assert!(da.join("manifest.jsonl").is_file());
    assert!(da.join("features").is_dir());
    assert!(da.join("prototypes.json").is_file());
    assert_eq!(files(&da), files(&db));
}

#[test]
fn synth_rejects_bad_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = openvad(&["synth", "--out", p(dir.path()), "--anomaly-fraction", "0.7,0.2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--anomaly-fraction"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(openvad(&["train"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = openvad(&[
        "knn", "--manifest", p(&missing), "--features", p(dir.path()), "--out", p(&dir.path().join("k.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = openvad(&["synth", "--out", p(dir.path()), "--hidden-size", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_every_config_field() {
    let help = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for field in serde_json::to_value(Config::default()).unwrap().as_object().unwrap().keys() {
        assert!(help.contains(&format!("--{}", field.replace('_', "-"))), "{field}");
    }
}

#[test]
fn zero_epochs_writes_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt = dir.path().join("init.ckpt");
    let out = train(&data, &ckpt, &["--epochs", "0", "--seed", "3"]);
    assert!(out.stdout.is_empty());
    let echoed = String::from_utf8(out.stderr).unwrap();
    assert!(echoed.contains("resolved config") && echoed.contains("\"seed\":3"));
    let loaded = Checkpoint::load(&ckpt, None, false).unwrap();
    let mut init = Model::init(&loaded.config, 8, &mut make_substream(3, streams::INIT));
    openvad::model::round_to_f32(&mut init.params);
    assert_eq!(loaded.model, init);
}

#[test]
fn train_score_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let (ckpt, ckpt2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let knn = dir.path().join("knn.json");
    let (m, f) = (data.join("manifest.jsonl"), data.join("features"));
    let mut args = vec!["knn", "--manifest", p(&m), "--features", p(&f), "--out", p(&knn)];
    args.extend_from_slice(MODEL);
    ok(&args);
    let run = train(&data, &ckpt, &["--epochs", "2", "--knn", p(&knn)]);
    train(&data, &ckpt2, &["--epochs", "2"]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt2).unwrap());
    let log = String::from_utf8(run.stdout).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 2 + 2, "16 videos at batch 8: two steps per epoch, plus summaries");
    assert!(lines[0]["loss_total"].is_f64());

    // scoring under two definitions
    let def_a = dir.path().join("a.json");
    let def_b = dir.path().join("b.json");
    std::fs::write(&def_a, r#"{"classes":[{"class_id":"fire","prompt_text":"fire"},{"class_id":"normal","prompt_text":"normal"}],"normal_index":1}"#).unwrap();
    std::fs::write(&def_b, r#"{"classes":[{"class_id":"theft","prompt_text":"someone stealing a bike"},{"class_id":"normal","prompt_text":"normal"}],"normal_index":1}"#).unwrap();
    let video = std::fs::read_to_string(&m).unwrap();
    let first: Value = serde_json::from_str(video.lines().next().unwrap()).unwrap();
    let vid = first["video_id"].as_str().unwrap();
    let score = |def: &Path, guided: &str| -> Value {
        let out = ok(&[
            "score", "--checkpoint", p(&ckpt), "--features", p(&f), "--video", vid, "--definition", p(def),
            "--language-guided", guided,
        ]);
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let (a, b) = (score(&def_a, "false"), score(&def_b, "false"));
    assert_eq!(a["frame_scores"], b["frame_scores"]);
    assert_eq!(a["video_class_probs"].as_array().unwrap().len(), 2);
    let (a, b) = (score(&def_a, "true"), score(&def_b, "true"));
    assert_ne!(a["frame_scores"], b["frame_scores"]);

    // an architecture override does not fit the checkpoint
    let out = openvad(&[
        "score", "--checkpoint", p(&ckpt), "--features", p(&f), "--video", vid, "--definition", p(&def_a),
        "--hidden-size", "32",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // protocol 2
    let subsets = dir.path().join("subsets.json");
    let protos: Value = serde_json::from_str(&std::fs::read_to_string(data.join("prototypes.json")).unwrap()).unwrap();
    let names: Vec<String> = protos["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["class_id"].as_str().unwrap().to_string())
        .collect();
    let test_labels: std::collections::BTreeSet<String> = video
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|r| r["split"] == "test" && r["label"] != "normal")
        .map(|r| r["label"].as_str().unwrap().to_string())
        .collect();
    let chosen: Vec<&String> = names.iter().filter(|n| test_labels.contains(*n)).take(2).collect();
    std::fs::write(
        &subsets,
        serde_json::json!([{"name": "s1", "classes": [chosen[0]]}, {"name": "s2", "classes": chosen}]).to_string(),
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let dump = dir.path().join("scores.jsonl");
    ok(&[
        "eval", "--checkpoint", p(&ckpt), "--protocol", "2", "--manifest", p(&m), "--features", p(&f),
        "--definition", p(&data.join("definition.json")), "--subsets", p(&subsets), "--out", p(&report),
        "--scores", p(&dump),
    ]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["protocol"], 2);
    assert_eq!(r["drift"]["k"], 2);
    let mean = r["drift"]["mean_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert_eq!(std::fs::read_to_string(&dump).unwrap().lines().count(), 12);

    // protocol 1 over two sets
    let sets = dir.path().join("sets.json");
    let set = |name: &str, metric: &str| {
        serde_json::json!({
            "name": name, "manifest": m, "features": f, "definition": data.join("definition.json"),
            "metric": metric, "split": "test"
        })
    };
    std::fs::write(&sets, serde_json::json!([set("x", "auc"), set("y", "ap")]).to_string()).unwrap();
    let out = ok(&["eval", "--checkpoint", p(&ckpt), "--protocol", "1", "--sets", p(&sets)]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let ds = r["cross_dataset"]["datasets"].as_array().unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds[0]["value"], ds[0]["auc"]);
    assert_eq!(ds[1]["value"], ds[1]["ap"]);

    // protocol 2 without its inputs is a usage error
    let out = openvad(&["eval", "--checkpoint", p(&ckpt), "--protocol", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn serve_failure_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt = dir.path().join("init.ckpt");
    train(&data, &ckpt, &["--epochs", "0"]);
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = openvad(&[
        "serve", "--checkpoint", p(&ckpt), "--features", p(&data.join("features")), "--port", &port,
    ]);
    assert_eq!(out.status.code(), Some(1));
}
