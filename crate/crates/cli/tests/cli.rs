use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn mmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmd")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn swap_problem() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../problems/swap_empty.json").to_string()
}

/// A small Empty-map model trained once through the CLI.
fn small_model() -> &'static PathBuf {
    static MODEL: OnceLock<PathBuf> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-model");
        let data = dir.join("data");
        let out = mmd(&["gen-data", "--map", "empty", "--n", "400", "--seed", "3", "--out", data.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let model_dir = dir.join("model");
        let out = mmd(&[
            "train",
            "--data",
            data.join("empty.mmds").to_str().unwrap(),
            "--out",
            model_dir.to_str().unwrap(),
            "--epochs",
            "40",
            "--hidden",
            "64",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        model_dir.join("empty.mmdm")
    })
}

#[test]
fn help_exits_zero() {
    let out = mmd(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "plan", "bench", "validate"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(code(&mmd(&["frobnicate"])), 2);
}

#[test]
fn missing_files_are_usage_errors() {
    let out = mmd(&["plan", "--problem", "/nonexistent/p.json", "--algo", "pp", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("problem file not found"));
    let out = mmd(&["bench", "--config", "/nonexistent/c.toml", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bench config not found"));
}

#[test]
fn malformed_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "algos = [\"xecbs\"\nscenario = ").unwrap();
    let out = mmd(&["bench", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed config"));
}

#[test]
fn plan_swap_writes_solution_and_validates() {
    let model = small_model();
    let dir = tempfile::tempdir().unwrap();
    let sol = dir.path().join("sol");
    let spec = format!("empty={}", model.display());
    let out = mmd(&[
        "plan",
        "--problem",
        &swap_problem(),
        "--algo",
        "xecbs",
        "--model",
        &spec,
        "--out",
        sol.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["robot_0.traj", "robot_1.traj", "stats.json", "problem.json"] {
        assert!(sol.join(f).is_file(), "{f} missing");
    }
    assert!(!sol.join("robot_2.traj").exists());
    assert_eq!(code(&mmd(&["validate", "--solution", sol.to_str().unwrap()])), 0);

    // Two copies of one robot's trajectory collide everywhere.
    fs::copy(sol.join("robot_0.traj"), sol.join("robot_1.traj")).unwrap();
    assert_eq!(code(&mmd(&["validate", "--solution", sol.to_str().unwrap()])), 4);
}

#[test]
fn plan_refuses_mismatched_horizon() {
    let model = small_model();
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("short.json");
    let text = fs::read_to_string(swap_problem()).unwrap().replace("\"horizon\": 64", "\"horizon\": 32");
    fs::write(&problem, text).unwrap();
    let spec = format!("empty={}", model.display());
    let out = mmd(&[
        "plan",
        "--problem",
        problem.to_str().unwrap(),
        "--algo",
        "cbs",
        "--model",
        &spec,
        "--out",
        dir.path().join("sol").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing models"));
}

#[test]
fn grid_planner_solves_swap() {
    let dir = tempfile::tempdir().unwrap();
    let sol = dir.path().join("grid");
    let out = mmd(&["plan", "--problem", &swap_problem(), "--algo", "astar-ecbs", "--out", sol.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&mmd(&["validate", "--solution", sol.to_str().unwrap()])), 0);
    let out = mmd(&["plan", "--problem", &swap_problem(), "--algo", "astardata-ecbs", "--out", sol.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.toml");
    fs::write(
        &cfg,
        "algos = [\"astar-ecbs\"]\nscenario = \"circle\"\nmaps = [\"empty\"]\nn_robots = [2, 3]\ntrials = 2\n",
    )
    .unwrap();
    let out_dir = dir.path().join("report");
    let out = mmd(&["bench", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trials.csv", "summary.json", "success.svg", "adherence.svg"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let csv = fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}
