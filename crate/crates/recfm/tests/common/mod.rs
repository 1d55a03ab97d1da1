#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn recfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recfm"))
        .args(args)
        .env_remove("RECFM_SEED")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(args: &[&str]) -> Output {
    let o = recfm(args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Every CSV under `dir` keyed by relative path.
pub fn csvs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "csv") {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Flags for a small advection-diffusion dataset.
pub const TINY_FIELD: &[&str] = &[
    "--dataset",
    "advection-diffusion",
    "--trajectories",
    "6",
    "--set",
    "data.h=8",
    "--set",
    "data.w=8",
    "--set",
    "data.frames=6",
];

/// Settings for a fast small network.
pub const TINY_TRAIN: &[&str] = &[
    "--iterations",
    "12",
    "--batch-size",
    "8",
    "--set",
    "model.hidden=[16]",
    "--set",
    "train.eval_every=4",
    "--set",
    "train.val_rows=8",
];

pub fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

pub fn ok_owned(args: &[String]) -> Output {
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&v)
}

/// gen-data, train, sample, eval and verify on the small field task into
/// `root`; returns the run directories.
pub fn field_pipeline(root: &Path, mode: &str) -> Vec<PathBuf> {
    let data = root.join("data");
    let train = root.join("train");
    let sample = root.join("sample");
    let eval = root.join("eval");
    let verify = root.join("verify");
    ok_owned(&with(&["gen-data", "--out", p(&data), "--seed", "3"], TINY_FIELD));
    ok_owned(&with(
        &["train", "--out", p(&train), "--data", p(&data), "--seed", "4", "--mode", mode],
        TINY_TRAIN,
    ));
    ok(&["sample", "--out", p(&sample), "--ckpt", p(&train), "--data", p(&data), "--seed", "5", "--members", "3", "--horizon", "3"]);
    ok(&["eval", "--out", p(&eval), "--ckpt", p(&train), "--data", p(&data), "--seed", "6", "--members", "3", "--steps", "1,2", "--horizon", "3"]);
    ok(&[
        "verify",
        "--out",
        p(&verify),
        "--check",
        "consistency",
        "--ckpt",
        p(&train),
        "--data",
        p(&data),
        "--seed",
        "7",
        "--set",
        "verify.points=8",
    ]);
    vec![data, train, sample, eval, verify]
}
