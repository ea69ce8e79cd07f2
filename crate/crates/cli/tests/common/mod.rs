#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mddkit"));
    c.env_remove("MDDKIT_SEED").env("RUST_LOG", "error");
    c
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// `--set` arguments pointing the data and run directories into `root`.
pub fn dirs(root: &Path) -> Vec<String> {
    vec![
        "--set".into(),
        format!("paths.data_dir={:?}", root.join("data").display().to_string()),
        "--set".into(),
        format!("paths.run_dir={:?}", root.join("runs").display().to_string()),
    ]
}

/// A corpus and models small enough to train in a few seconds.
pub fn tiny(root: &Path) -> Vec<String> {
    let mut args = dirs(root);
    for kv in [
        "synth.num_utts=24",
        "synth.split=[0.5, 0.25, 0.25]",
        "train.epochs=1",
        "train.finetune_epochs=1",
        "beam.beam_size=2",
        "gradcheck.instances=3",
    ] {
        args.push("--set".into());
        args.push(kv.into());
    }
    args
}

pub fn run(args: &[String], tail: &[&str]) -> Output {
    let out = bin().args(args).args(tail).output().expect("spawn mddkit");
    out
}

pub fn ok(args: &[String], tail: &[&str]) -> Output {
    let out = run(args, tail);
    assert!(
        out.status.success(),
        "mddkit {tail:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}
