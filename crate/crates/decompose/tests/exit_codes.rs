use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL_RUNAWAY: &str = r#"{
  "name": "small-runaway",
  "manifold": {"kind": "euclidean"},
  "sequence": {
    "generator": "runaway-bump",
    "bumps": [{"radius": 0.25, "start": [0.0, 0.0], "step": [0.4, 0.0]}]
  },
  "params": {"p": 4.0, "k_max": 16, "grid_res": 32, "compatibility_tol": 0.02},
  "expect": {"bubbles": 1, "vanishing": false}
}"#;

fn decompose(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_decompose"));
    cmd.args(args).env_remove("DECOMPOSE_OUT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn validate_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL_RUNAWAY);
    let out = decompose(&["validate", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let filled: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(filled["params"]["i_max"], 12);
    assert_eq!(filled["net"]["padding"], 2.5);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.json", &SMALL_RUNAWAY.replace("\"name\"", "\"colour\": 1,\n  \"name\""));
    let out = decompose(&["validate", unknown.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("line 2"), "{}", text(&out.stderr));

    let critical = write_config(dir.path(), "p2.json", &SMALL_RUNAWAY.replace("\"p\": 4.0", "\"p\": 2.0"));
    let out = decompose(&["run", critical.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("(2, ∞)"), "{}", text(&out.stderr));

    let missing = dir.path().join("absent.json");
    assert_eq!(decompose(&["run", missing.to_str().unwrap()], &[]).status.code(), Some(2));
    assert_eq!(decompose(&[], &[]).status.code(), Some(2));
    assert_eq!(decompose(&["run", "--grid-res", "many", "x.json"], &[]).status.code(), Some(2));
}

#[test]
fn run_writes_artifacts_and_glued_documents_recheck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL_RUNAWAY);
    let env_out = dir.path().join("from-env");
    let out = decompose(&["run", cfg.to_str().unwrap()], &[("DECOMPOSE_OUT", &env_out)]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", text(&out.stdout), text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS bubble-count")), "{stdout}");
    assert!(!stdout.lines().any(|l| l.starts_with("FAIL")), "{stdout}");
    for name in ["report.json", "traces.csv", "glued_1.json"] {
        assert!(env_out.join(name).exists(), "{name} missing");
    }

    let glued = env_out.join("glued_1.json");
    let out = decompose(&["gluing-check", glued.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
    assert!(text(&out.stdout).contains("PASS cocycle"));

    // break the stored chart offsets so the domains overlap
    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(&glued).unwrap()).unwrap();
    let offsets = doc["gluing"]["offsets"].as_array_mut().unwrap();
    offsets[1] = offsets[0].clone();
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = decompose(&["gluing-check", tampered.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("FAIL disjoint-domains"), "{}", text(&out.stdout));
}

#[test]
fn failed_expectation_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", &SMALL_RUNAWAY.replace("\"bubbles\": 1", "\"bubbles\": 2"));
    let out_dir = dir.path().join("out");
    let out = decompose(&["run", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("FAIL bubble-count"), "{}", text(&out.stdout));
    assert!(out_dir.join("report.json").exists());
}
