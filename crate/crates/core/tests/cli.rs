//! End-to-end runs of the `bdc` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdc")).args(args).output().unwrap()
}

fn config(dir: &Path) -> String {
    dir.join("bdc.toml").to_string_lossy().into_owned()
}

fn run_all(cfg: &str) -> Vec<String> {
    let mut stdout = Vec::new();
    for verb in ["collect", "cluster", "train-experts", "train-hypernet", "eval"] {
        let out = bdc(&[verb, "--config", cfg]);
        assert!(out.status.success(), "{verb}: {}", String::from_utf8_lossy(&out.stderr));
        stdout.push(String::from_utf8(out.stdout).unwrap());
    }
    stdout
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(bdc(&["init", "--config", &config(d.path())]).status.success());
    }
    let out_a = run_all(&config(a.path()));
    let out_b = run_all(&config(b.path()));
    assert_eq!(out_a, out_b);
    assert!(out_a[0].contains("AC 100.0"), "{}", out_a[0]);
    assert!(out_a[4].contains("disenlora"), "{}", out_a[4]);
    assert_eq!(tree(&a.path().join("out")), tree(&b.path().join("out")));

    let cross = bdc(&[
        "eval",
        "--config",
        &config(a.path()),
        "--dataset",
        &a.path().join("toy_b.tsv").to_string_lossy(),
    ]);
    assert!(cross.status.success());
    assert!(String::from_utf8_lossy(&cross.stdout).starts_with("cross-dataset"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("out/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), report["k"].as_u64().unwrap() as usize + 3);
}

#[test]
fn seed_override_reaches_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    assert!(bdc(&["init", "--config", &cfg]).status.success());
    assert!(bdc(&["collect", "--config", &cfg]).status.success());
    assert!(bdc(&["cluster", "--config", &cfg]).status.success());
    let model = dir.path().join("out/cluster_model.txt");
    let first = std::fs::read_to_string(&model).unwrap();
    assert!(bdc(&["cluster", "--config", &cfg, "--seed", "9"]).status.success());
    let reseeded = std::fs::read_to_string(&model).unwrap();
    assert!(reseeded.contains("seed 9"), "{reseeded}");
    assert_ne!(first, reseeded);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());

    let missing = bdc(&["collect", "--config", &cfg]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("bdc collect"));

    assert!(bdc(&["init", "--config", &cfg]).status.success());
    assert_eq!(bdc(&["eval", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(bdc(&["train-experts", "--config", &cfg]).status.code(), Some(1));

    std::fs::write(dir.path().join("bad.toml"), "problems = 3\n").unwrap();
    let bad = bdc(&["cluster", "--config", &config(dir.path()).replace("bdc.toml", "bad.toml")]);
    assert_eq!(bad.status.code(), Some(2));

    // A process executor whose interpreter does not exist is an
    // infrastructure failure.
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("kind = \"mock\"", "kind = \"process\"\nrun = [\"/nonexistent/interpreter\", \"{file}\"]");
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(bdc(&["collect", "--config", &cfg]).status.code(), Some(4));
}
