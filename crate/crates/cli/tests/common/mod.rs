#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn chatnmt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chatnmt"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn chatnmt")
}

/// Runs and insists on exit code 0.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = chatnmt(dir, args);
    assert!(
        out.status.success(),
        "chatnmt {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn code(dir: &Path, args: &[&str]) -> i32 {
    chatnmt(dir, args).status.code().expect("exit code")
}

pub const TINY: &[&str] = &[
    "--d-model", "16", "--d-ff", "32", "--heads", "2", "--encoder-layers", "1", "--decoder-layers", "1",
    "--latent-dim", "4", "--max-positions", "64", "--batch-tokens", "300", "--log-every", "1",
];

/// Synthetic data plus a short stage-1 run; returns the work directory.
pub fn stage1(dialogues: usize, steps: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let n = dialogues.to_string();
    ok(dir.path(), &["prepare", "--synthetic", "--dialogues", &n, "--out", "data"]);
    let steps = steps.to_string();
    let mut args = vec!["train", "--data", "data", "--corpus", "data/corpus.jsonl", "--out", "s1.ckpt", "--max-steps", &steps];
    args.extend(TINY);
    ok(dir.path(), &args);
    let path = dir.path().to_path_buf();
    (dir, path)
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}
