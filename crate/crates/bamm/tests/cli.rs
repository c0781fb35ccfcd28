use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bamm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bamm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("BAMM_CHECKPOINT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ck = ["--checkpoint-dir", "ck", "--seed", "3"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = ck.iter().chain(args).copied().collect();
        let out = bamm(dir, &all);
        assert_ok(&out);
        out
    };

    run(&["synth-data", "--out", "data/train.jsonl", "--per-family", "6"]);
    assert!(dir.join("data/labels.json").exists());
    run(&["train-tokenizer", "--data", "data/train.jsonl", "--steps", "8"]);
    run(&["train-transformer", "--data", "data/train.jsonl", "--steps", "3"]);
    run(&["train-refiner", "--data", "data/train.jsonl", "--steps", "2"]);
    for f in ["tokenizer.ckpt", "transformer.ckpt", "refiner.ckpt", "labels.json", "transformer_metrics.jsonl"] {
        assert!(dir.join("ck").join(f).exists(), "{f} missing");
    }

    run(&["generate", "--label", "2", "--length", "40", "--out", "g1.json"]);
    run(&["generate", "--label", "2", "--length", "40", "--out", "g2.json"]);
    assert_eq!(std::fs::read(dir.join("g1.json")).unwrap(), std::fs::read(dir.join("g2.json")).unwrap());
    let g = read_json(&dir.join("g1.json"));
    assert_eq!(g["frames"].as_array().unwrap().len(), 40);
    assert_eq!(g["tokens"].as_array().unwrap().len(), 10);
    assert_eq!(g["fps"], 20);
    assert!(g["trace"]["passes"].is_array());

    run(&["edit", "--input", "g1.json", "--label", "1", "--task", "custom", "--span", "8:20", "--out", "e.json"]);
    let e = read_json(&dir.join("e.json"));
    let (src, out) = (g["frames"].as_array().unwrap(), e["frames"].as_array().unwrap());
    assert_eq!(out.len(), 40);
    for f in (0..8).chain(20..40) {
        assert_eq!(src[f], out[f], "frame {f} outside the span changed");
    }

    std::fs::write(dir.join("story.json"), r#"{"segments": [{"label": 0, "length": 6}, {"label": 1, "length": 5}], "transition_tokens": 2}"#).unwrap();
    run(&["generate", "--label", "0", "--story", "story.json", "--out", "long.json"]);
    assert_eq!(read_json(&dir.join("long.json"))["frames"].as_array().unwrap().len(), 4 * 13);

    run(&["eval", "--data", "data/train.jsonl", "--out", "eval.json", "--length-samples", "10", "--edit-trials", "2"]);
    let ev = read_json(&dir.join("eval.json"));
    assert!(ev["refinement_test"]["p_value"].is_number());
    assert_eq!(ev["edit_fidelity"].as_array().unwrap().len(), 4);

    std::fs::write(dir.join("grid.json"), r#"[{"cfg_s1": 1.0, "cfg_s2": 1.0, "cfg_refine": 1.0, "temperature_1": 1.0, "temperature_2": 1.0, "strategy": {"kind": "suffix"}, "n_iterations": 2, "t_max": 50, "seed": 0, "top_k": null}]"#).unwrap();
    run(&["sweep", "--data", "data/train.jsonl", "--grid", "grid.json", "--samples", "2", "--out", "sweep.csv"]);
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("config_id,cfg_s1,cfg_s2,cfg_refine,strategy,n_iterations,masked_nll,masked_acc,gen_nearest_mse"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn missing_checkpoint_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bamm(tmp.path(), &["--checkpoint-dir", "nowhere", "generate", "--label", "0", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tokenizer.ckpt"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["generate", "--bogus"], &["--preset", "giant", "serve"], &["edit", "--input", "a", "--label", "0", "--task", "x", "--out", "b"]] {
        let out = bamm(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn invalid_config_override_fails() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), r#"{"train": {"steps": "lots"}}"#).unwrap();
    let out = bamm(tmp.path(), &["--config", "c.json", "synth-data", "--out", "d.jsonl", "--per-family", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));
}

#[test]
fn synthetic_data_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, seed) in [("a.jsonl", "1"), ("b.jsonl", "1"), ("c.jsonl", "2")] {
        assert_ok(&bamm(tmp.path(), &["--seed", seed, "synth-data", "--out", name, "--per-family", "2"]));
    }
    let read = |n: &str| std::fs::read(tmp.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_ne!(read("a.jsonl"), read("c.jsonl"));
}
