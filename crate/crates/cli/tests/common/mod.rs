#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_CONFIG: &str = r#"{
  "model": {
    "architecture": {"d_model": 16, "n_heads": 2, "d_ff": 32},
    "pretrain": {"steps": 40},
    "corpus": {"n_countdown": 200, "n_chain": 50}
  },
  "grpo": {"steps": 6, "num_iterations": 2},
  "task": {"n_train": 200, "n_test": 12},
  "analysis": {"bench_prompts": 4, "bench_runs": 1}
}"#;

pub fn medlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medlab")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = medlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs every subcommand into `root` and returns the deterministic run directories.
pub fn full_pipeline(root: &Path, config: &Path) -> Vec<PathBuf> {
    let d = |name: &str| root.join(name);
    let s = |p: PathBuf| p.to_str().unwrap().to_string();
    let cfg = s(config.to_path_buf());
    ok(&["pretrain", "--config", &cfg, "--out", &s(d("pre"))]);
    let base = s(d("pre").join("checkpoint.json"));
    ok(&["rl-train", "--config", &cfg, "--out", &s(d("rl")), "--checkpoint", &base]);
    let tuned = s(d("rl").join("checkpoint.json"));
    ok(&["evaluate", "--config", &cfg, "--out", &s(d("ev")), "--checkpoint", &tuned]);
    ok(&["evaluate", "--config", &cfg, "--out", &s(d("evf")), "--checkpoint", &base, "--mode", "fixed", "--c", "8"]);
    ok(&["generate", "--config", &cfg, "--out", &s(d("gen")), "--checkpoint", &tuned, "--n", "4"]);
    let traces = s(d("ev").join("traces.jsonl"));
    let baseline = s(d("evf").join("traces.jsonl"));
    ok(&["analyze", "--traces", &traces, "--baseline", &baseline, "--out", &s(d("an")), "--config", &cfg]);
    ok(&["theorem1", "--kmax", "5", "--out", &s(d("thm"))]);
    ok(&["bench-overhead", "--config", &cfg, "--out", &s(d("bench")), "--checkpoint", &tuned]);
    ["pre", "rl", "ev", "evf", "gen", "an", "thm"].iter().map(|n| d(n)).collect()
}

/// File name to contents for every file in a run directory.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}
