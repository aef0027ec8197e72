use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use patrolsim::experiment::{aggregate, RunSummary};
use patrolsim::metrics::RunLog;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_patrolsim"));
    c.env_remove("PATROLSIM_OUT");
    c
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name)
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn validate_reports_general_layout() {
    let text = ok(run(&["validate", "--config", p(&preset("general.json"))]));
    assert!(text.contains("nodes: 20"));
    assert!(text.contains("component sum: 90.01%"));
    assert!(text.contains("sizes 11, 11, 8"));
    assert!(text.contains("\n2,1,4.33,12.99\n"));
    assert!(text.contains("\n11,1|2,6.33,18.99\n"));
}

#[test]
fn validate_benchmark_requirements() {
    let text = ok(run(&["validate", "--config", p(&preset("benchmark.json"))]));
    let rows: Vec<&str> = text.lines().filter(|l| l.ends_with(",4.50,9.00")).collect();
    assert_eq!(rows.len(), 20);
}

#[test]
fn validate_rejects_over_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("over.json");
    std::fs::write(
        &path,
        r#"{"circles": [[1, 2, 3]], "component_percent": {"1": 50, "2": 30, "3": 20.5},
            "agents": [{"id": 1, "circle": 1}]}"#,
    )
    .unwrap();
    let out = run(&["validate", "--config", p(&path)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("100.50%") && err.contains("capacity"), "{err}");
}

#[test]
fn zero_step_run_writes_empty_outputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(&[
        "run",
        "--config",
        p(&preset("benchmark.json")),
        "--runs",
        "1",
        "--steps",
        "0",
        "--out",
        p(dir.path()),
    ]));
    let base = dir.path().join("benchmark");
    let csv = std::fs::read_to_string(base.join("0").join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("step,mean_insufficiency,comm_count,epsilon,contact,components,I_1,"));
    let agg = std::fs::read_to_string(base.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1);
    assert!(base.join("0").join("checkpoint.bin").is_file());
}

#[test]
fn aggregate_matches_per_run_logs() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(&[
        "run",
        "--config",
        p(&preset("benchmark.json")),
        "--runs",
        "3",
        "--seed",
        "20",
        "--steps",
        "12000",
        "--jobs",
        "2",
        "--out",
        p(dir.path()),
    ]));
    let base = dir.path().join("benchmark");
    let logs: Vec<RunLog> = (20..23)
        .map(|s| RunLog::read_csv(std::fs::File::open(base.join(s.to_string()).join("run.csv")).unwrap()).unwrap())
        .collect();
    let expected = aggregate(&logs);
    let mut r = csv::Reader::from_path(base.join("aggregate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    for (row, e) in rows.iter().zip(&expected) {
        assert_eq!(row[0].parse::<u64>().unwrap(), e.step);
        assert!((row[1].parse::<f64>().unwrap() - e.mean).abs() < 1e-9);
        assert!((row[2].parse::<f64>().unwrap() - e.std).abs() < 1e-9);
        assert!((row[3].parse::<f64>().unwrap() - e.comm_mean).abs() < 1e-9);
    }
    for s in 20..23 {
        let text = std::fs::read_to_string(base.join(s.to_string()).join("summary.json")).unwrap();
        let summary: RunSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(summary.seed, s);
        assert_eq!(summary.steps, 12_000);
    }
}

#[test]
fn experiment_file_and_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp.json");
    std::fs::copy(preset("benchmark.json"), dir.path().join("world.json")).unwrap();
    std::fs::write(
        &exp,
        r#"{"name": "small", "world": "world.json", "total_steps": 2000, "seeds": [4, 9],
            "params": {"log_every": 500}}"#,
    )
    .unwrap();
    let root = dir.path().join("out");
    ok(bin()
        .args(["run", "--config", p(&exp)])
        .env("PATROLSIM_OUT", &root)
        .output()
        .unwrap());
    for seed in ["4", "9"] {
        let csv = std::fs::read_to_string(root.join("small").join(seed).join("run.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
}

#[test]
fn dynamic_replay_and_heatmap_export() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(&[
        "run",
        "--config",
        p(&preset("general.json")),
        "--runs",
        "1",
        "--seed",
        "3",
        "--steps",
        "6000",
        "--out",
        p(dir.path()),
    ]));
    let run_dir = dir.path().join("general").join("3");

    let matrix = ok(run(&["export-heatmap", "--run", p(&run_dir), "--step", "5500"]));
    let mut lines = matrix.lines();
    assert!(lines.next().unwrap().starts_with("row,node_1,node_2,"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["agent_1", "agent_2", "agent_3", "total", "required"]);
    for col in 1..rows[0].len() {
        let sum: f64 = rows[..3].iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!((sum - rows[3][col].parse::<f64>().unwrap()).abs() < 1e-9);
    }
    // Each agent spends all of its time somewhere.
    for r in &rows[..3] {
        let total: f64 = r[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((total - 100.0).abs() < 1e-9);
    }

    let out = dir.path().join("dyn");
    ok(run(&[
        "dynamic",
        "--checkpoint",
        p(&run_dir.join("checkpoint.bin")),
        "--mutations",
        p(&preset("dynamic_addremove.json")),
        "--steps",
        "1500",
        "--out",
        p(&out),
    ]));
    let replay = out.join("dynamic_addremove");
    let transient = std::fs::read_to_string(replay.join("transient.csv")).unwrap();
    let header = transient.lines().next().unwrap();
    assert!(header.starts_with("offset,step,D_1,") && header.ends_with(",D_21"));
    assert_eq!(transient.lines().count(), 1 + 1001);
    assert!(transient.lines().nth(1).unwrap().starts_with("0,6000,"));
    assert!(replay.join("snapshots").join("heatmap_7000.csv").is_file());

    let frozen = dir.path().join("frozen");
    ok(run(&[
        "dynamic",
        "--checkpoint",
        p(&run_dir.join("checkpoint.bin")),
        "--mutations",
        p(&preset("dynamic_swap.json")),
        "--steps",
        "200",
        "--freeze",
        "--out",
        p(&frozen),
    ]));
    assert!(frozen.join("dynamic_swap").join("transient.csv").is_file());
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["validate", "--config", p(&dir.path().join("nope.json"))]);
    assert!(!missing.status.success());

    let no_snap = run(&["export-heatmap", "--run", p(dir.path()), "--step", "10"]);
    assert!(!no_snap.status.success());
    assert!(String::from_utf8_lossy(&no_snap.stderr).contains("no heat-map snapshot"));

    ok(run(&[
        "run",
        "--config",
        p(&preset("benchmark.json")),
        "--runs",
        "1",
        "--steps",
        "10",
        "--out",
        p(dir.path()),
    ]));
    let cp = dir.path().join("benchmark").join("0").join("checkpoint.bin");
    let bad = run(&[
        "dynamic",
        "--checkpoint",
        p(&cp),
        "--mutations",
        p(&preset("dynamic_addremove.json")),
        "--out",
        p(dir.path()),
    ]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("does not apply"));
}
