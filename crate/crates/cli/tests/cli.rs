//! End-to-end tests driving the compiled binary through the full
//! synth -> split -> mistats -> counterfactual -> grid -> eval workflow.

use std::path::Path;
use std::process::{Command, Output};

fn caqubo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caqubo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth_into(dir: &Path) {
    let out = caqubo(&[
        "synth",
        "--users",
        "80",
        "--items",
        "120",
        "--features",
        "16",
        "--informative",
        "4",
        "--seed",
        "5",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
}

#[test]
fn synth_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    assert!(dir.path().join("urm.tsv").exists());
    assert!(dir.path().join("icm.tsv").exists());
    let planted = std::fs::read_to_string(dir.path().join("planted.txt")).unwrap();
    assert_eq!(planted.lines().count(), 4);
}

#[test]
fn split_mistats_counterfactual_chain() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();

    let out = caqubo(&[
        "split",
        "--urm",
        &d("urm.tsv"),
        "--ratio",
        "0.8",
        "--seed",
        "1",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);

    let out = caqubo(&[
        "mistats",
        "--urm-train",
        &d("urm_train.tsv"),
        "--icm",
        &d("icm.tsv"),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    let mi = std::fs::read_to_string(dir.path().join("mi.tsv")).unwrap();
    assert_eq!(mi.lines().count(), 16);
    let cmi = std::fs::read_to_string(dir.path().join("cmi.tsv")).unwrap();
    assert_eq!(cmi.lines().count(), 16 * 15);

    let out = caqubo(&[
        "counterfactual",
        "--urm-train",
        &d("urm_train.tsv"),
        "--urm-test",
        &d("urm_test.tsv"),
        "--icm",
        &d("icm.tsv"),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let stdout = assert_ok(&out);
    assert!(stdout.contains("base nDCG@10"), "stdout: {stdout}");
    let e = std::fs::read_to_string(dir.path().join("e.tsv")).unwrap();
    assert_eq!(e.lines().count(), 16);
    assert!(dir.path().join("e.json").exists());
}

#[test]
fn solve_reads_dump_and_writes_mask_plus_json() {
    let dir = tempfile::tempdir().unwrap();
    // Separable instance: minimum selects variables 0 and 2.
    std::fs::write(
        dir.path().join("q.qubo"),
        "# provenance: test\n3 0\n0 0 -1\n1 1 2\n2 2 -3\n",
    )
    .unwrap();
    let mask_path = dir.path().join("mask.txt");
    let out = caqubo(&[
        "solve",
        "--qubo",
        dir.path().join("q.qubo").to_str().unwrap(),
        "--exhaustive",
        "--out",
        mask_path.to_str().unwrap(),
    ]);
    let stdout = assert_ok(&out);
    assert!(stdout.contains("\"energy\""));
    let mask = std::fs::read_to_string(&mask_path).unwrap();
    let indices: Vec<&str> = mask.lines().collect();
    assert_eq!(indices, vec!["0", "2"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("mask.txt.json")).unwrap())
            .unwrap();
    assert_eq!(summary["energy"], serde_json::json!(-4.0));
    assert_eq!(summary["popcount"], serde_json::json!(2));
}

#[test]
fn grid_then_eval_reproduces_reported_ndcg() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let out_dir = dir.path().join("out");

    let out = caqubo(&[
        "grid",
        "--urm",
        &d("urm.tsv"),
        "--icm",
        &d("icm.tsv"),
        "--output_dir",
        out_dir.to_str().unwrap(),
        "--lambda_grid",
        "0,1e3",
        "--k_grid",
        "4",
        "--gamma",
        "auto",
        "--n_runs",
        "3",
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4); // header + 2 cells + baseline
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("report.md").exists());

    // Pick the lambda=1e3 row and re-evaluate its mask via `eval`.
    let row = csv
        .lines()
        .find(|l| l.starts_with("1000,"))
        .expect("lambda=1e3 row present");
    let fields: Vec<&str> = row.split(',').collect();
    let recorded_ndcg: f64 = fields[6].parse().unwrap();
    let mask_file = fields[9];

    let out = caqubo(&[
        "eval",
        "--urm-train",
        out_dir.join("urm_train.tsv").to_str().unwrap(),
        "--urm-test",
        out_dir.join("urm_test.tsv").to_str().unwrap(),
        "--icm",
        &d("icm.tsv"),
        "--mask",
        out_dir.join(mask_file).to_str().unwrap(),
    ]);
    let stdout = assert_ok(&out);
    let printed = stdout.trim();
    assert_eq!(
        printed,
        format!("{recorded_ndcg:.4}"),
        "eval must print 4 decimals"
    );
}

#[test]
fn select_prints_row_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path());
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    // Config file plus flag overrides.
    let config_path = dir.path().join("exp.conf");
    std::fs::write(
        &config_path,
        format!(
            "urm={}\nicm={}\noutput_dir={}\nlambda_grid=0\nk_grid=4\nn_runs=2\ngamma=auto\n",
            d("urm.tsv"),
            d("icm.tsv"),
            dir.path().join("out").display()
        ),
    )
    .unwrap();
    let out = caqubo(&[
        "select",
        "--config",
        config_path.to_str().unwrap(),
        "--lambda",
        "1e3",
        "--k",
        "5",
    ]);
    let stdout = assert_ok(&out);
    assert!(stdout.contains("\"lambda\": 1000.0"), "stdout: {stdout}");
    assert!(stdout.contains("selected"), "stdout: {stdout}");
}

#[test]
fn bad_config_fails_with_stage_tagged_message() {
    let out = caqubo(&["grid", "--urm", "missing.tsv", "--icm", "missing.tsv"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("output_dir") || stderr.contains("config") || stderr.contains("stage"),
        "stderr: {stderr}"
    );
}

#[test]
fn eval_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.tsv"), "# shape: 2 3\n0\t0\t1\n").unwrap();
    std::fs::write(dir.path().join("test.tsv"), "# shape: 2 4\n0\t1\t1\n").unwrap();
    std::fs::write(dir.path().join("icm.tsv"), "# shape: 3 2\n0\t0\t1\n").unwrap();
    std::fs::write(dir.path().join("mask.txt"), "0\n").unwrap();
    let out = caqubo(&[
        "eval",
        "--urm-train",
        dir.path().join("train.tsv").to_str().unwrap(),
        "--urm-test",
        dir.path().join("test.tsv").to_str().unwrap(),
        "--icm",
        dir.path().join("icm.tsv").to_str().unwrap(),
        "--mask",
        dir.path().join("mask.txt").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("shape"), "stderr: {stderr}");
}
