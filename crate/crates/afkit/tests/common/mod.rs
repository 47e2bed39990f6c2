#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use afkit::synth::{self, SynthConfig};
use serde_json::{json, Value};

/// Writes a small synthetic corpus and a fast config into `dir` and returns
/// the config path. `patch` is merged into the config one level deep.
pub fn small_project(dir: &Path, contexts: usize, patch: Value) -> PathBuf {
    let scale = contexts as f64 / 500.0;
    let d = SynthConfig::default();
    let syn = SynthConfig {
        contexts,
        background_short: (d.background_short as f64 * scale) as usize,
        background_runon: (d.background_runon as f64 * scale) as usize,
        background_long: (d.background_long as f64 * scale) as usize,
        ..d
    };
    synth::write(dir, &syn).unwrap();
    let mut cfg = json!({
        "seed": 3,
        "paths": { "workdir": "work", "corpus": "corpus.jsonl", "lm_extra": "background.txt" },
        "generation": { "n_samples": 40 },
        "af": { "mlp_only_iterations": 2, "max_iterations": 6, "window": 3 },
        "committee": {
            "embed_dim": 8, "mlp_hidden": 8, "cnn_filters_per_width": 4, "cnn_widths": [2, 3],
            "lstm_hidden": 4, "ensemble_hidden": 8, "epochs": 1
        },
        "validation": { "simulate": { "min_tokens": 4 } }
    });
    merge(&mut cfg, patch);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot @ Value::Object(_)) if v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

pub fn afkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afkit")).args(args).output().expect("binary runs")
}

/// Runs a pipeline command against `config` and returns (exit code, stderr).
pub fn run(config: &Path, args: &[&str]) -> (i32, String) {
    let mut full = vec!["--config", config.to_str().unwrap()];
    full.extend_from_slice(args);
    let out = afkit(&full);
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

pub fn ok(config: &Path, args: &[&str]) {
    let (code, err) = run(config, args);
    assert_eq!(code, 0, "afkit {args:?} failed: {err}");
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
