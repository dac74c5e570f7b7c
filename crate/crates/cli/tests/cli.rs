use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tsenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsenet"))
        .args(args)
        .env("TSENET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tsenet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(dir: &Path) -> PathBuf {
    let out = ok(&["fixture", dir.to_str().unwrap(), "--seed", "5"]);
    PathBuf::from(out.trim())
}

/// Every file under `root`, relative path to bytes.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

const STAGES: &[&[&str]] = &[
    &["skeleton"],
    &["expand"],
    &["train", "tse"],
    &["train", "backbone"],
    &["train", "fnn-grid"],
    &["train", "prune"],
    &["eval", "tse"],
    &["interpret", "tse"],
    &["viz"],
];

fn run_all(config: &Path, out: &Path) {
    for stage in STAGES {
        let mut args: Vec<&str> = stage.to_vec();
        args.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        ok(&args);
    }
}

#[test]
fn every_stage_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = dir.path().join("run");
    run_all(&cfg, &out);
    let first = snapshot(&out);
    for f in [
        "hierarchy.json",
        "core.json",
        "core.dot",
        "weights/tse.bin",
        "reports/comparison.md",
        "images/layer-1.ppm",
    ] {
        assert!(first.contains_key(Path::new(f)), "missing {f}");
    }
    run_all(&cfg, &out);
    assert_eq!(snapshot(&out), first);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = dir.path().join("run");
    let run = |threads: &str| {
        let _ = std::fs::remove_dir_all(&out);
        for stage in [&["skeleton"][..], &["expand"], &["train", "tse"]] {
            let mut args: Vec<&str> = stage.to_vec();
            args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            let o = Command::new(env!("CARGO_BIN_EXE_tsenet"))
                .args(&args)
                .env("TSENET_THREADS", threads)
                .output()
                .unwrap();
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        snapshot(&out)
    };
    assert_eq!(run("1"), run("4"));
}

#[test]
fn comparison_reports_param_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();
    for stage in STAGES.iter().take(6) {
        let mut args = stage.to_vec();
        args.extend(["--config", c]);
        ok(&args);
    }
    let out = dir.path().join("out");
    let rows: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out.join("reports/comparison.json")).unwrap()).unwrap();
    let params = |m: &str| {
        rows.iter().find(|r| r["model"] == m).unwrap()["params"]
            .as_u64()
            .unwrap()
    };
    let ratio = |m: &str| {
        rows.iter().find(|r| r["model"] == m).unwrap()["ratio"]
            .as_f64()
            .unwrap()
    };
    let dense = params("fnn-grid");
    for m in ["tse", "backbone", "prune", "fnn-grid"] {
        assert_eq!(ratio(m), params(m) as f64 / dense as f64, "{m}");
    }
    assert_eq!(params("prune"), params("tse"));
    let table = std::fs::read_to_string(out.join("reports/comparison.md")).unwrap();
    assert!(table.lines().next().unwrap().contains("ratio"));
    assert_eq!(table.lines().count(), 2 + 4);
}

#[test]
fn paused_training_resumes_to_the_same_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    for out in [a, b] {
        ok(&["skeleton", "--config", c, "--out", out]);
        ok(&["expand", "--config", c, "--out", out]);
    }
    ok(&["train", "tse", "--config", c, "--out", a]);
    let mut pauses = 0;
    loop {
        let s = ok(&["train", "tse", "--config", c, "--out", b, "--max-epochs", "4"]);
        if !s.contains("paused") {
            break;
        }
        pauses += 1;
        assert!(Path::new(b).join("checkpoints/tse.json").exists());
    }
    assert!(pauses >= 2, "only {pauses} pauses");
    assert!(!Path::new(b).join("checkpoints/tse.json").exists());
    for f in ["weights/tse.bin", "weights/tse.json", "reports/train-tse.json"] {
        assert_eq!(
            std::fs::read(Path::new(a).join(f)).unwrap(),
            std::fs::read(Path::new(b).join(f)).unwrap(),
            "{f}"
        );
    }
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = tsenet(args);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn input_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();

    let (code, err) = exit_code(&["skeleton", "--data", "/nonexistent/table.csv"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("nonexistent"), "{err}");

    ok(&["skeleton", "--config", c]);
    let (code, err) = exit_code(&["expand", "--config", c, "--rho", "0"]);
    assert_eq!(code, 2);
    assert!(err.contains("invalid configuration"), "{err}");

    let (code, err) = exit_code(&["train", "mystery", "--config", c]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown strategy"), "{err}");

    ok(&["expand", "--config", c]);
    ok(&["train", "tse", "--config", c]);
    let (code, _) = exit_code(&[
        "interpret",
        "tse",
        "--config",
        c,
        "--embeddings",
        "/nonexistent/emb.txt",
    ]);
    assert_eq!(code, 2);

    let (code, err) = exit_code(&["eval", "fnn-grid", "--config", c]);
    assert_eq!(code, 2, "{err}");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "skeleton": {"delta": -1}}"#).unwrap();
    assert_eq!(exit_code(&["skeleton", "--config", bad.to_str().unwrap()]).0, 2);
    std::fs::write(&bad, r#"{"sede": 1}"#).unwrap();
    assert_eq!(exit_code(&["skeleton", "--config", bad.to_str().unwrap()]).0, 2);

    let out = Command::new(env!("CARGO_BIN_EXE_tsenet"))
        .arg("strategies")
        .env("TSENET_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn strategies_are_listed_by_name() {
    let s = ok(&["strategies"]);
    let names: Vec<&str> = s.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, ["backbone", "fnn-grid", "prune", "tse"]);
}

#[test]
fn manifest_tracks_config_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let c = cfg.to_str().unwrap();
    let manifest = |out: &str| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(Path::new(out).join("manifest.json")).unwrap()).unwrap()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["skeleton", "--config", c, "--out", a.to_str().unwrap()]);
    ok(&["skeleton", "--config", c, "--out", b.to_str().unwrap()]);
    let (ma, mb) = (manifest(a.to_str().unwrap()), manifest(b.to_str().unwrap()));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["format_version"], 1);
    ok(&["skeleton", "--config", c, "--out", b.to_str().unwrap(), "--delta", "4"]);
    let mb = manifest(b.to_str().unwrap());
    assert_ne!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(mb["config"]["skeleton"]["delta"], 4.0);
}
