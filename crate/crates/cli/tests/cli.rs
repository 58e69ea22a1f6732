//! End-to-end tests against the compiled binary: exit codes, schema
//! errors, result determinism, checkpoint inspection, curve export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qmpnn::synth::{synthesize_citation, write_node_dataset, CitationSpec};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qmpnn"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_dataset(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let g = synthesize_citation(&CitationSpec::small(21)).unwrap();
    write_node_dataset(&g, dir, "toy").unwrap()
}

fn node_config(dir: &Path, extra: &str) -> PathBuf {
    let (e, f, l) = write_dataset(dir);
    let body = format!(
        r#"{{
  "dataset": {{"name": "toy", "edges": "{}", "features": "{}", "labels": "{}"}},
  "task": "node",
  "model": {{"kind": "gcn", "arithmetic": "real", "hidden": 16}},
  "train": {{"max_epochs": 25, "patience": 25, "dropout": 0.3}},
  "split": {{"train": 0.8, "val": 0.1, "test": 0.1, "seed": 0}},
  "seeds": [1, 2, 3, 4, 5],
  "out_dir": "out"{extra}
}}"#,
        e.file_name().unwrap().to_string_lossy(),
        f.file_name().unwrap().to_string_lossy(),
        l.file_name().unwrap().to_string_lossy(),
    );
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn strip_walltime(csv: &str) -> String {
    csv.lines()
        .map(|l| match l.rfind(',') {
            Some(pos) => &l[..pos],
            None => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn unknown_config_field_exits_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    let path = node_config(dir.path(), r#", "not_a_real_field": 1"#);
    let out = bin().args(["run"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("not_a_real_field"), "{stderr}");
}

#[test]
fn missing_config_file_exits_2() {
    let out = bin()
        .args(["run", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn five_seed_run_writes_five_rows_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let path = node_config(dir.path(), "");
    run_ok(&["run", path.to_str().unwrap()]);
    let csv_path = dir.path().join("out/results.csv");
    let first = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(first.lines().count(), 6, "header + 5 seed rows");

    // Second run into a different directory: byte-identical except wall
    // time.
    run_ok(&[
        "run",
        path.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out2").to_str().unwrap(),
    ]);
    let second = fs::read_to_string(dir.path().join("out2/results.csv")).unwrap();
    assert_eq!(strip_walltime(&first), strip_walltime(&second));

    // Input dataset files were not modified.
    let g = synthesize_citation(&CitationSpec::small(21)).unwrap();
    let reference = TempDir::new().unwrap();
    let (e_ref, f_ref, l_ref) = write_node_dataset(&g, reference.path(), "toy").unwrap();
    for (fresh, used) in [
        (e_ref, dir.path().join("toy_edges.tsv")),
        (f_ref, dir.path().join("toy_features.csv")),
        (l_ref, dir.path().join("toy_labels.txt")),
    ] {
        assert_eq!(fs::read(&fresh).unwrap(), fs::read(&used).unwrap());
    }
}

#[test]
fn seed_override_changes_the_seed_list() {
    let dir = TempDir::new().unwrap();
    let path = node_config(dir.path(), "");
    run_ok(&["run", path.to_str().unwrap(), "--seed-override", "9,10"]);
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains(",9,"));
    assert!(csv.contains(",10,"));

    let out = bin()
        .args(["run", path.to_str().unwrap(), "--seed-override", "oops"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_reports_dense_and_corrupt_checkpoints() {
    let dir = TempDir::new().unwrap();
    let path = node_config(dir.path(), "");
    run_ok(&["run", path.to_str().unwrap(), "--seed-override", "1"]);
    let ckpt = dir.path().join("out/toy_gcn_real_node_seed1");
    let out = run_ok(&["inspect", ckpt.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("global sparsity: 0.000"), "{stdout}");
    assert!(stdout.contains("layer0.weight"));

    // Truncate the weight file: inspect now fails at runtime (exit 1).
    let weights = ckpt.join("weights.bin");
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() / 2]).unwrap();
    let out = bin()
        .args(["inspect", ckpt.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn prune_run_emits_curve_rows_and_ticket_inspects_sparse() {
    let dir = TempDir::new().unwrap();
    let extra = r#", "prune": {"iterations": 3, "mask_step": 0.05, "target_sparsity": 0.45, "round_cap": 10}"#;
    let path = node_config(dir.path(), extra);
    run_ok(&["run", path.to_str().unwrap(), "--seed-override", "1"]);
    let csv_path = dir.path().join("out/results.csv");
    let csv = fs::read_to_string(&csv_path).unwrap();
    // Dense row + rounds at sparsity 0.2, 0.36, 0.488.
    assert_eq!(csv.lines().count(), 5, "{csv}");

    let out = run_ok(&[
        "inspect",
        dir.path()
            .join("out/toy_gcn_real_node_seed1/ticket")
            .to_str()
            .unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("ticket: 3 rounds"), "{stdout}");
    // Schedule lands at 1 − 0.8³ up to per-round floor rounding.
    assert!(stdout.contains("global sparsity: 0.48"), "{stdout}");

    let curve = dir.path().join("curve.csv");
    run_ok(&[
        "export-curve",
        csv_path.to_str().unwrap(),
        curve.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&curve).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sparsity,mean,std,baseline");
    assert_eq!(lines.len(), 4);

    // Missing-column input is rejected.
    let bogus = dir.path().join("bogus.csv");
    fs::write(&bogus, "a,b\n1,2\n").unwrap();
    let out = bin()
        .args([
            "export-curve",
            bogus.to_str().unwrap(),
            curve.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
