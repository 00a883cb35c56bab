use std::path::Path;
use std::process::{Command, Output};

fn cmmloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmmloc")).args(args).output().unwrap()
}

fn generate(out: &Path) -> Output {
    cmmloc(&[
        "generate",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "data.train_scenes=1",
        "data.queries_per_scene=20",
    ])
}

#[test]
fn generate_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = generate(d.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["config.txt", "data/train.jsonl", "data/val.jsonl", "data/test.jsonl"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn eval_without_checkpoint_fails_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path()).status.success());
    let out = cmmloc(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("coarse.ckpt"), "{err}");
    assert!(!dir.path().join("results.csv").exists());
}

#[test]
fn unknown_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmmloc(&["generate", "--out", dir.path().to_str().unwrap(), "window.gama=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("window.gama"));
}

#[test]
fn unknown_ablation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmmloc(&["ablate", "dropout", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dropout"));
}
