#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protoqda"));
    cmd.env("RUST_LOG", "error");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn synthetic_config(samples_per_class: usize) -> Value {
    json!({
        "n_way": 5,
        "k_shot": 1,
        "m_query": 5,
        "r": 10,
        "epochs": 2,
        "episodes_train": 10,
        "episodes_val": 20,
        "episodes_test": 40,
        "learning_rate": 0.01,
        "warmup_steps": 5,
        "dropout": 0.1,
        "heads": 2,
        "seed": 3,
        "data": {"synthetic": {
            "classes": [12, 6, 6],
            "samples_per_class": samples_per_class,
            "dim": 8,
            "class_center_scale": 1.0,
            "intra_class_stddev": 0.6,
            "signal_dims": 2,
            "tokens_per_sample": 2,
            "seed": 1
        }}
    })
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A raw-text dataset with `classes` labels and its word-vector file.
pub fn write_text_corpus(dir: &Path, classes: usize, per_class: usize) -> (PathBuf, PathBuf) {
    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
    let mut data = String::new();
    for c in 0..classes {
        for i in 0..per_class {
            let text = format!("{} {} label{c}", words[i % 6], words[(i + c) % 6]);
            data.push_str(&json!({"id": format!("{c}-{i}"), "text": text, "label": format!("label{c}")}).to_string());
            data.push('\n');
        }
    }
    let mut vectors = format!("{} 3\n", 6 + classes);
    for (i, w) in words.iter().enumerate() {
        vectors.push_str(&format!("{w} {} {} {}\n", i as f64 * 0.1, 1.0 - i as f64 * 0.2, 0.5));
    }
    for c in 0..classes {
        vectors.push_str(&format!("label{c} {} {} {}\n", (c as f64).sin(), (c as f64).cos(), c as f64 * 0.05));
    }
    let data_path = dir.join("data.jsonl");
    let vec_path = dir.join("vectors.txt");
    std::fs::write(&data_path, data).unwrap();
    std::fs::write(&vec_path, vectors).unwrap();
    (data_path, vec_path)
}
