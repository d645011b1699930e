//! End-to-end runs of the compiled binary: command wiring, file outputs and
//! exit codes. Configs are kept tiny so the whole file runs in seconds.

use std::path::Path;
use std::process::Command;

fn invdyn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_invdyn"))
}

fn tiny_run_args(out: &Path) -> Vec<String> {
    [
        "run",
        "--set",
        "n_iterations=2",
        "--set",
        "horizon=300",
        "--set",
        "seed=5",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.to_str().unwrap().to_string()])
    .collect()
}

#[test]
fn run_writes_the_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run1");
    let status = invdyn().args(tiny_run_args(&out)).status().unwrap();
    assert!(status.success());

    let resolved = std::fs::read_to_string(out.join("resolved.toml")).unwrap();
    assert!(resolved.contains("n_iterations = 2"));
    assert!(resolved.contains("policy_kp = 25.0"), "tuning echoed");

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "header plus two iterations");

    let model = invdyn::checkpoint::load(&out.join("model.ckpt")).unwrap();
    assert_eq!(model.iteration(), 2);

    // reruns are byte-identical
    let out2 = dir.path().join("run2");
    let status = invdyn().args(tiny_run_args(&out2)).status().unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read_to_string(out2.join("metrics.csv")).unwrap(),
        metrics
    );
    assert_eq!(
        std::fs::read(out.join("model.ckpt")).unwrap(),
        std::fs::read(out2.join("model.ckpt")).unwrap()
    );
}

#[test]
fn run_dumps_datasets_and_traces_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let mut args = tiny_run_args(&out);
    args.push("--dump-datasets".into());
    args.push("--trace".into());
    let status = invdyn().args(&args).status().unwrap();
    assert!(status.success());
    let ds = std::fs::read_to_string(out.join("datasets/joint_01.csv")).unwrap();
    let header = ds.lines().next().unwrap();
    assert_eq!(header, "t,source,q0,q1,qd0,qd1,qdd0,qdd1,y0,y1");
    // joint dataset of a 300-step episode: 300 direct + 299 indirect rows
    assert_eq!(ds.lines().count() - 1, 599);
    assert!(out.join("trace/episode_02.csv").exists());
}

#[test]
fn bad_config_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "noise_level = \"extreme\"\n").unwrap();
    let output = invdyn()
        .args([
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("very_high"), "lists valid levels: {stderr}");
}

#[test]
fn sweep_aggregate_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sweep_out = dir.path().join("sweep");
    let status = invdyn()
        .args([
            "sweep",
            "--set",
            "repetitions=2",
            "--set",
            "noise_levels=[\"low\"]",
            "--set",
            "controllers=[\"pid\"]",
            "--set",
            "data_sources=[\"indirect\",\"joint\"]",
            "--set",
            "n_iterations=2",
            "--set",
            "horizon=300",
            "--out",
            sweep_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let index = std::fs::read_to_string(sweep_out.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 5, "header plus 4 runs");

    let agg_out = dir.path().join("agg");
    let status = invdyn()
        .args([
            "aggregate",
            "--runs",
            sweep_out.to_str().unwrap(),
            "--out",
            agg_out.to_str().unwrap(),
            "--group-by",
            "source",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let agg = std::fs::read_to_string(agg_out.join("aggregate.csv")).unwrap();
    // 2 groups x 2 iterations
    assert_eq!(agg.lines().count(), 5);
    assert!(agg.lines().skip(1).all(|l| l.contains("2,0,")), "n_runs=2, none excluded");

    let plot_out = dir.path().join("plots");
    let status = invdyn()
        .args([
            "plot-data",
            "--aggregate",
            agg_out.join("aggregate.csv").to_str().unwrap(),
            "--out",
            plot_out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(plot_out.join("plot_source-indirect.csv").exists());
    assert!(plot_out.join("plot_source-joint.csv").exists());
}

#[test]
fn verify_reports_every_check_once_and_succeeds() {
    let output = invdyn().args(["verify", "--json"]).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let checks = report.as_array().unwrap();
    let names: Vec<&str> = checks
        .iter()
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    let mut unique = names.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), names.len(), "duplicate check names");
    assert_eq!(names.len(), 7);
    assert!(checks.iter().all(|c| c["passed"].as_bool().unwrap()));
}
