use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use skewfa::factor::{CovarianceStructure, FactorCovariance};
use skewfa::fit::{Component, Family, MixtureModel};
use skewfa::io::{load_csv, CsvOptions, ModelArchive};
use skewfa::selection::ari;

fn skewfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skewfa")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn truth() -> MixtureModel {
    let p = 4;
    let cov = FactorCovariance::new(DMatrix::from_fn(p, 1, |j, _| 0.5 + 0.1 * j as f64), DVector::from_element(p, 0.4)).unwrap();
    let components = (0..2)
        .map(|g| Component {
            mu: DVector::from_fn(p, |j, _| if g == 0 { 0.0 } else if j % 2 == 0 { 6.0 } else { -6.0 }),
            skew: DVector::from_fn(p, |j, _| if (g + j) % 2 == 0 { 1.0 } else { -0.5 }),
            cov: cov.clone(),
            nu: 8.0,
        })
        .collect();
    MixtureModel { family: Family::Sdb, structure: CovarianceStructure::UUU, pi: vec![0.5, 0.5], components }
}

/// Writes the reference model and a 200-row sample from it into `dir`.
fn sampled_data(dir: &Path) -> (PathBuf, PathBuf) {
    let model = dir.join("truth.json");
    ModelArchive::from_model(&truth()).save(&model).unwrap();
    let data = dir.join("data.csv");
    let out = skewfa(&["sample", "--model", model.to_str().unwrap(), "--n", "200", "--seed", "3", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (model, data)
}

fn report_value<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix(':')))
        .unwrap_or_else(|| panic!("report has no `{key}` line:\n{report}"))
        .trim()
}

#[test]
fn sample_then_fit_recovers_the_groups() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = sampled_data(dir.path());
    let labels_out = dir.path().join("labels.csv");
    let out = skewfa(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--label-column",
        "component",
        "--G",
        "2",
        "--q",
        "1",
        "--seed",
        "1",
        "--labels-out",
        labels_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout(&out);
    for key in ["family", "structure", "G", "q", "free_params", "loglik", "bic", "iterations", "converged"] {
        report_value(&report, key);
    }
    assert_eq!(report_value(&report, "family"), "sdb");
    assert_eq!(report_value(&report, "free_params"), "35");
    let score: f64 = report_value(&report, "ari").parse().unwrap();
    assert!(score >= 0.9, "ari {score}");

    let truth_labels = load_csv(&data, &CsvOptions { label_column: Some("component".into()), ..CsvOptions::default() }).unwrap();
    let fitted = std::fs::read_to_string(&labels_out).unwrap();
    let fitted: Vec<usize> = fitted.lines().skip(1).map(|l| l.trim().parse().unwrap()).collect();
    assert_eq!(fitted.len(), 200);
    assert!(ari(truth_labels.labels.as_ref().unwrap(), &fitted).unwrap() >= 0.9);
}

#[test]
fn select_ranks_every_cell_by_bic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = sampled_data(dir.path());
    let grid = dir.path().join("grid.toml");
    std::fs::write(&grid, "families = [\"sdb\"]\nstructures = [\"UUU\", \"CCC\"]\ng_range = [2, 2]\nq_range = [1, 1]\n\n[config]\nmax_iter = 60\n").unwrap();
    let table = dir.path().join("table.csv");
    let best = dir.path().join("best.json");
    let out = skewfa(&[
        "select",
        "--data",
        data.to_str().unwrap(),
        "--label-column",
        "component",
        "--grid",
        grid.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
        "--out",
        best.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let bic_col = header.iter().position(|h| *h == "bic").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    let bics: Vec<f64> = rows.iter().map(|r| r[bic_col].parse().unwrap()).collect();
    assert!(bics[0] >= bics[1]);
    let archive = ModelArchive::load(&best).unwrap();
    let structure_col = header.iter().position(|h| *h == "structure").unwrap();
    assert_eq!(archive.structure.id(), rows[0][structure_col]);
}

#[test]
fn evaluate_reports_agreement_on_labelled_data() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data) = sampled_data(dir.path());
    let out = skewfa(&["evaluate", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--label-column", "component"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let score: f64 = report_value(&stdout(&out), "ari").parse().unwrap();
    assert!(score >= 0.95);
}

#[test]
fn moments_check_runs_against_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("component.json");
    std::fs::write(&params, r#"{"mu": [0.0, 0.5], "skew": [1.0, -0.5], "lambda": [[0.6], [0.3]], "psi": [0.5, 0.7], "nu": 6.0}"#).unwrap();
    let out = skewfa(&["moments-check", "--params", params.to_str().unwrap(), "--point", "0.8,0.1", "--draws", "20000", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let z: f64 = report_value(&stdout(&out), "max_abs_z").parse().unwrap();
    assert!(z.is_finite() && z < 5.0, "max |z| {z}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = sampled_data(dir.path());
    let data = data.to_str().unwrap();
    assert_eq!(skewfa(&["fit"]).status.code(), Some(1));
    assert_eq!(skewfa(&["fit", "--data", "/no/such/file.csv"]).status.code(), Some(1));
    assert_eq!(skewfa(&["fit", "--data", data, "--label-column", "component", "--q", "4"]).status.code(), Some(1));
    assert_eq!(skewfa(&["fit", "--data", data, "--structure", "XYZ"]).status.code(), Some(1));
    assert_eq!(skewfa(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_csv_names_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "a,b\n1,2\n3,oops\n5,6\n").unwrap();
    let out = skewfa(&["fit", "--data", data.to_str().unwrap(), "--G", "1", "--q", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
}

#[test]
fn sample_inverts_standardization() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = sampled_data(dir.path());
    let archive = dir.path().join("std.json");
    let out = skewfa(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--label-column",
        "component",
        "--G",
        "2",
        "--q",
        "1",
        "--standardize",
        "--out",
        archive.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ModelArchive::load(&archive).unwrap().standardization.is_some());
    let resampled = dir.path().join("again.csv");
    let out = skewfa(&["sample", "--model", archive.to_str().unwrap(), "--n", "2000", "--seed", "9", "--out", resampled.to_str().unwrap()]);
    assert!(out.status.success());
    let original = load_csv(&data, &CsvOptions { label_column: Some("component".into()), ..CsvOptions::default() }).unwrap();
    let again = load_csv(&resampled, &CsvOptions { label_column: Some("component".into()), ..CsvOptions::default() }).unwrap();
    // draws come back on the original scale, so column means roughly agree
    for j in 0..4 {
        let m0 = original.data.column(j).mean();
        let m1 = again.data.column(j).mean();
        assert!((m0 - m1).abs() < 0.6, "column {j}: {m0} vs {m1}");
    }
}
