use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn afree(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afree"))
        .args(args)
        .current_dir(workspace())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(report: &str, key: &str) -> String {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{report}"))
        .to_string()
}

#[test]
fn audit_of_divergence_reports_rank_one() {
    let o = afree(&["audit", "--op", "gallery/divergence2d"]);
    assert_eq!(o.status.code(), Some(0));
    let r = stdout(&o);
    assert_eq!(field(&r, "constant_rank"), "true");
    assert_eq!(field(&r, "r"), "1");
}

#[test]
fn audit_of_diagonal_gradient_annihilator_exits_two() {
    let o = afree(&["audit", "--op", "gallery/mueller_diagonal"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(field(&stdout(&o), "constant_rank"), "false");
}

#[test]
fn unknown_operator_is_an_error() {
    let o = afree(&["audit", "--op", "gallery/no_such_operator"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_operator"));
}

#[test]
fn operator_file_is_read_with_or_without_extension() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(workspace().join("gallery/curl2d.toml")).unwrap();
    let path = dir.path().join("mine.toml");
    std::fs::write(&path, text).unwrap();
    for arg in [
        path.display().to_string(),
        dir.path().join("mine").display().to_string(),
    ] {
        let o = afree(&["cone", "--op", &arg, "--vector", "1,1"]);
        assert_eq!(o.status.code(), Some(0));
        assert_eq!(field(&stdout(&o), "member"), "true");
    }
}

#[test]
fn malformed_operator_file_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"bad\"\ndim = 2\ndim = 3\n").unwrap();
    let o = afree(&["audit", "--op", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml:3"));
}

#[test]
fn pairing_the_norm_with_a_dirac_at_zero_gives_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ym = dir.path().join("zero.ym");
    std::fs::write(
        &ym,
        r#"{
  "domain": {"lower": [0, 0], "upper": [1, 1], "cells": [4, 4]},
  "fiber": 2,
  "uniform": {"nu": {"weights": [1], "points": [[0, 0]]}}
}"#,
    )
    .unwrap();
    let o = afree(&[
        "pair",
        "--ym",
        ym.to_str().unwrap(),
        "--integrand",
        "norm()",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&stdout(&o), "value"), "0");
}

#[test]
fn malformed_young_measure_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let ym = dir.path().join("bad.ym");
    std::fs::write(
        &ym,
        "{\n  \"domain\": {\"lower\": [0, 0],\n  \"upper\": oops\n}",
    )
    .unwrap();
    let o = afree(&[
        "pair",
        "--ym",
        ym.to_str().unwrap(),
        "--integrand",
        "norm()",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3 column"));
}

#[test]
fn every_selftest_passes() {
    for sub in [
        "audit",
        "cone",
        "exactness",
        "project",
        "envelope",
        "certify",
        "generate",
        "approx",
        "pair",
        "gallery",
    ] {
        let o = afree(&[sub, "--selftest"]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", stdout(&o));
        assert!(stdout(&o).contains("... ok"));
    }
}

#[test]
fn generated_triple_is_certified_and_pairs_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let ym = dir.path().join("t.ym");
    let ym = ym.to_str().unwrap();
    let o = afree(&[
        "generate",
        "--op",
        "divergence2d",
        "--p-points",
        "1,0;-1,0",
        "--grid",
        "32",
        "--stages",
        "3",
        "--ym-out",
        ym,
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(&stdout(&o), "norm_limit"), "1");
    let c = afree(&["certify", "--op", "divergence2d", "--ym", ym]);
    assert_eq!(c.status.code(), Some(0));
    assert_eq!(field(&stdout(&c), "certified"), "true");
    // the same triple is not A-free for the scalar Laplacian's fiber
    let l = afree(&["certify", "--op", "laplacian2d", "--ym", ym]);
    assert_eq!(l.status.code(), Some(1));
}

#[test]
fn approx_writes_table_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    let o = afree(&[
        "approx",
        "--op",
        "divergence2d",
        "--target",
        "circle",
        "--grid",
        "64",
        "--eps",
        "8,4",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("epsilon,area,area_error"));
    assert_eq!(table.lines().count(), 3);
    let f = afree_core::io::read_field_binary(&csv.with_extension("bin")).unwrap();
    assert_eq!((f.dim(), f.n(), f.fiber()), (2, 64, 2));
}

#[test]
fn reports_are_deterministic_under_a_fixed_seed() {
    let args = [
        "project", "--op", "curl2d", "--grid", "16", "--seed", "7", "--format", "csv",
    ];
    let a = afree(&args);
    let b = afree(&args);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).starts_with("key,value\n"));
    assert_eq!(a.stdout, b.stdout);
    let c = afree(&[
        "project", "--op", "curl2d", "--grid", "16", "--seed", "8", "--format", "csv",
    ]);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn report_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit.txt");
    let o = afree(&[
        "audit",
        "--op",
        "divergence3d",
        "--threads",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), stdout(&o));
}
