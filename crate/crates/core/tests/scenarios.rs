//! The bundled scenario scripts, run through the binary as an operator would.

use std::path::PathBuf;
use std::process::Command;

fn run(name: &str) {
    let script: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    let out = Command::new(env!("CARGO_BIN_EXE_gridbox"))
        .env_clear()
        .args(["scenario"])
        .arg(&script)
        .output()
        .unwrap();
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{name} exited {:?}\n{report}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn table2() {
    run("table2.scn");
}

#[test]
fn density() {
    run("density.scn");
}

#[test]
fn partial_failure() {
    run("partial_failure.scn");
}

#[test]
fn local_only() {
    run("local_only.scn");
}

#[test]
fn failing_assertions_exit_with_8() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.scn");
    std::fs::write(
        &script,
        "start-vo 1 CAM\ngen-cohort CAM 1 2\nquery-at CAM all select images where true\nassert-summary all images=0 patients=0\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_gridbox"))
        .env_clear()
        .arg("scenario")
        .arg(&script)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(8), "{}", String::from_utf8_lossy(&out.stdout));
}
