use std::path::Path;
use std::process::{Command, Output};

use l1_dilation::runner::{InstanceFile, Report};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l1-dilation"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn gen_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let inst = path(dir.path(), "inst.json");
    let out = bin(&["gen", "--size", "3", "--seed", "5", "--out", &inst]);
    assert_eq!(out.status.code(), Some(0));
    let parsed = InstanceFile::load(Path::new(&inst)).unwrap();
    assert_eq!(parsed.mu.len(), 3);

    let report = path(dir.path(), "report.json");
    let out = bin(&[
        "verify",
        &inst,
        "--horizon",
        "3",
        "--samples",
        "5000",
        "--out",
        &report,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: Report = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.verdict);
    assert_eq!(r.input_digest, parsed.digest());
}

#[test]
fn gen_is_reproducible() {
    let a = bin(&["gen", "--size", "4", "--seed", "9", "--contraction"]);
    let b = bin(&["gen", "--size", "4", "--seed", "9", "--contraction"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn failed_verification_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let inst = path(dir.path(), "neg.json");
    std::fs::write(
        &inst,
        r#"{"mu": [0.5, 0.5], "T": [[1.5, 0.5], [-0.5, 0.5]]}"#,
    )
    .unwrap();
    let out = bin(&["verify", &inst, "--samples", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let r: Report = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!r.verdict);
    assert_eq!(r.checks.len(), 1);
}

#[test]
fn malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let inst = path(dir.path(), "bad.json");
    std::fs::write(&inst, r#"{"mu": [0.5, 0.5], "T": [[1.0]]}"#).unwrap();
    assert_eq!(bin(&["verify", &inst]).status.code(), Some(2));
    std::fs::write(&inst, "not json").unwrap();
    assert_eq!(bin(&["verify", &inst]).status.code(), Some(2));
    let missing = path(dir.path(), "missing.json");
    assert_eq!(bin(&["verify", &missing]).status.code(), Some(2));
}

#[test]
fn rota_and_mc_subcommands() {
    let out = bin(&["rota", "--size", "3", "--horizon", "3", "--seed", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let r: Report = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r.checks.iter().any(|c| c.name == "power_limit"));

    let out = bin(&[
        "mc",
        "--size",
        "2",
        "--horizon",
        "2",
        "--samples",
        "4000",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("name,parameters,residual"));
    assert!(text.lines().last().unwrap().starts_with("mc_z,"));
}

#[test]
fn reports_match_modulo_timing() {
    let args = [
        "verify",
        "--size",
        "3",
        "--seed",
        "11",
        "--horizon",
        "2",
        "--samples",
        "3000",
    ];
    let a: Report = serde_json::from_slice(&bin(&args).stdout).unwrap();
    let b: Report = serde_json::from_slice(&bin(&args).stdout).unwrap();
    assert_eq!(
        serde_json::to_string(&a.without_timing()).unwrap(),
        serde_json::to_string(&b.without_timing()).unwrap()
    );
}
