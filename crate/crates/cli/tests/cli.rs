mod common;

use std::fs;

use common::{code, fixture, ok, run, tiny};
use serde_json::Value;

fn score_json(pred: &str, manifest: &str) -> (i32, Value) {
    let out = run(&[], &["score", "--predictions", pred, "--manifest", manifest]);
    let v = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (code(&out), v)
}

#[test]
fn speak_fixture_counts() {
    let (status, v) = score_json(
        fixture("speak_predictions.jsonl").to_str().unwrap(),
        fixture("speak_manifest.jsonl").to_str().unwrap(),
    );
    assert_eq!(status, 0);
    let c = &v["counts"];
    for (k, want) in [("ta", 1), ("fa", 1), ("fr", 1), ("tr", 2), ("cd", 1), ("ed", 1)] {
        assert_eq!(c[k], want, "{k}");
    }
    for k in ["precision", "recall", "f1"] {
        let got = v["report"][k].as_f64().unwrap();
        assert!((got - 66.67).abs() <= 0.01, "{k} = {got}");
    }
}

#[test]
fn score_ignores_record_order() {
    let dir = tempfile::tempdir().unwrap();
    let refs = [
        r#"{"id":"a","canonical":"k ae t","perceived":"k ah t"}"#,
        r#"{"id":"b","canonical":"d ao g","perceived":"d ao g"}"#,
        r#"{"id":"c","canonical":"s ih t","perceived":"s t"}"#,
    ];
    let preds = [
        r#"{"id":"a","predicted":"k ah t"}"#,
        r#"{"id":"b","predicted":"d aa g"}"#,
        r#"{"id":"c","predicted":"s ih t"}"#,
    ];
    let write = |name: &str, lines: &[&str]| {
        let p = dir.path().join(name);
        fs::write(&p, lines.join("\n") + "\n").unwrap();
        p.to_str().unwrap().to_string()
    };
    let m1 = write("m1.jsonl", &refs);
    let p1 = write("p1.jsonl", &preds);
    let m2 = write("m2.jsonl", &[refs[2], refs[0], refs[1]]);
    let p2 = write("p2.jsonl", &[preds[1], preds[2], preds[0]]);
    let a = run(&[], &["score", "--predictions", &p1, "--manifest", &m1]);
    let b = run(&[], &["score", "--predictions", &p2, "--manifest", &m2]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn unmatched_predictions_are_skipped_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.jsonl");
    let p = dir.path().join("p.jsonl");
    fs::write(&m, "{\"id\":\"a\",\"canonical\":\"k\",\"perceived\":\"k\"}\n{\"id\":\"b\",\"canonical\":\"t\",\"perceived\":\"t\"}\n").unwrap();
    fs::write(&p, "{\"id\":\"a\",\"predicted\":\"k\"}\n{\"id\":\"z\",\"predicted\":\"k\"}\n").unwrap();
    let (status, v) = score_json(p.to_str().unwrap(), m.to_str().unwrap());
    assert_eq!(status, 3);
    assert_eq!(v["scored"], 1);
    let skipped: Vec<&str> = v["skipped"].as_array().unwrap().iter().map(|s| s[0].as_str().unwrap()).collect();
    assert_eq!(skipped, vec!["b", "z"]);
}

#[test]
fn config_errors_exit_2() {
    let out = run(&["--set".into(), "train.epoch=3".into()], &["print-config"]);
    assert_eq!(code(&out), 2);
    let out = run(&["--set".into(), "weights.lambda=2".into()], &["print-config"]);
    assert_eq!(code(&out), 2);
    let out = common::bin().env("MDDKIT_SEED", "nope").arg("print-config").output().unwrap();
    assert_eq!(code(&out), 2);
    let out = run(&[], &["sweep-lambda", "--checkpoint", "x.ckpt", "--lambdas", "0.5,7"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[train]\nepochs = 4\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let seed_of = |out: std::process::Output| {
        let v: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
        (v["seed"].as_integer().unwrap(), v["train"]["epochs"].as_integer().unwrap())
    };
    let out = common::bin().args(["--config", cfg, "print-config"]).output().unwrap();
    assert_eq!(seed_of(out), (5, 4));
    let out = common::bin().env("MDDKIT_SEED", "9").args(["--config", cfg, "print-config"]).output().unwrap();
    assert_eq!(seed_of(out), (9, 4));
    let out = common::bin()
        .env("MDDKIT_SEED", "9")
        .args(["--config", cfg, "--set", "seed=2", "print-config"])
        .output()
        .unwrap();
    assert_eq!(seed_of(out), (2, 4));
}

#[test]
fn gradcheck_flags_a_sign_flip() {
    let args = tiny(std::path::Path::new("."));
    assert_eq!(code(&run(&args, &["gradcheck"])), 0);
    assert_eq!(code(&run(&args, &["gradcheck", "--flip-sign"])), 4);
}

#[test]
fn missing_prerequisite_and_mode_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(dir.path());
    ok(&args, &["synth"]);
    // fine-tuning needs both earlier stages
    let out = run(&args, &["train", "--stage", "if-finetune"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing prerequisite"));

    ok(&args, &["train", "--stage", "ctc-joint"]);
    let ckpt = dir.path().join("runs/ctc-joint/best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = run(&args, &["decode", "--checkpoint", ckpt, "--mode", "ottc-greedy"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = ok(&args, &["decode", "--checkpoint", ckpt, "--mode", "ctc-greedy"]);
    let lines = String::from_utf8(out.stdout).unwrap();
    assert_eq!(lines.lines().count(), 6);
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let straight = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();
    let two = |root: &std::path::Path| {
        let mut a = tiny(root);
        a.extend(["--set".to_string(), "train.epochs=2".to_string()]);
        a
    };
    ok(&tiny(straight.path()), &["synth"]);
    ok(&two(straight.path()), &["train", "--stage", "crottc-am"]);

    ok(&tiny(resumed.path()), &["synth"]);
    ok(&tiny(resumed.path()), &["train", "--stage", "crottc-am"]);
    ok(&two(resumed.path()), &["train", "--stage", "crottc-am", "--resume"]);

    for f in ["last.ckpt", "best.ckpt", "log.csv"] {
        let a = fs::read(straight.path().join("runs/crottc-am").join(f)).unwrap();
        let b = fs::read(resumed.path().join("runs/crottc-am").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
    // resuming a finished run changes nothing
    let best = resumed.path().join("runs/crottc-am/best.ckpt");
    let before = fs::read(&best).unwrap();
    ok(&two(resumed.path()), &["train", "--stage", "crottc-am", "--resume"]);
    assert_eq!(fs::read(&best).unwrap(), before);
}
