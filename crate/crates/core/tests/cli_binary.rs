use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_noisy-avg"));
    c.env_remove("NOISY_AVG_OUT");
    c
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn write_spec(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("exp.spec");
    fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = "preset = custom\nseed = 11\nsizes = 16\nsample_paths = 3\nmax_outer = 12\n";

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn validate_echoes_canonically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let out = bin().arg("validate").arg(&spec).output().unwrap();
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("preset = custom\n"));
    assert!(text.contains("seed = 11\n"));
    let again = write_spec(dir.path(), &text);
    let out2 = bin().arg("validate").arg(&again).output().unwrap();
    assert_eq!(String::from_utf8(out2.stdout).unwrap(), text);
}

#[test]
fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), "preset = custom\ndelta = 0.6\nmax_outer = -3\n");
    let out = bin().arg("validate").arg(&spec).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("delta must be in (0, 1/2)"));
    assert!(err.contains("seed is required"));
    assert!(err.contains("max_outer"));

    let missing = bin()
        .arg("validate")
        .arg(dir.path().join("absent.spec"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn run_writes_artifacts_and_respects_flags() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--spec"])
        .arg(&spec)
        .args([
            "--seed",
            "12",
            "--paths",
            "4",
            "--mode",
            "explicit",
            "--workers",
            "2",
            "--out",
        ])
        .arg(&out_dir)
        .output()
        .unwrap();
    ok(&out);
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().count(), 5);
    assert_eq!(
        files(&out_dir),
        vec![
            "custom-grid2d-n16-bounds.json",
            "custom-grid2d-n16-curve.csv",
            "custom-grid2d-n16-graph.txt",
            "custom-grid2d-n16-trace.csv",
            "custom-stopping-times.csv",
        ]
    );
    let curve = fs::read_to_string(out_dir.join("custom-grid2d-n16-curve.csv")).unwrap();
    assert!(curve.contains("# seed = 12\n"));
    assert!(curve.contains("# sample_paths = 4\n"));
    assert!(curve.contains("# dissemination_mode = explicit\n"));
}

#[test]
fn env_var_overrides_spec_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        &format!(
            "{SMALL}output_dir = {}\n",
            dir.path().join("spec-dir").display()
        ),
    );
    let env_dir = dir.path().join("env-dir");
    let out = bin()
        .args(["run", "--spec"])
        .arg(&spec)
        .env("NOISY_AVG_OUT", &env_dir)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_dir.join("custom-stopping-times.csv").exists());
    assert!(!dir.path().join("spec-dir").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&bin()
        .args(["run", "--workers", "1", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap());
    ok(&bin()
        .args(["run", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap());
    for name in files(&a) {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bad_invocations_fail() {
    let out = bin().args(["run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["run", "--preset", "fig-mse", "--paths", "1"])
        .env("NOISY_AVG_OUT", std::env::temp_dir())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_paths"));
    let out = bin().args(["run", "--preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
}
