//! End-to-end checks of the command-line interface.

use std::process::Command;

fn d2oc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_d2oc"))
}

#[test]
fn run_exports_files_and_metrics_reproduces_the_swd() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{
            "n_agents": 3,
            "max_steps": 15,
            "seed": 11,
            "map": {"type": "gaussian_mixture", "n_samples": 30, "components": 2, "spread": 1.5},
            "swd_projections": 20
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");

    let run = d2oc()
        .args(["run", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        run.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&run.stderr)
    );
    for name in [
        "trajectories.csv",
        "links.csv",
        "metrics.json",
        "map.csv",
        "trajectories.dat",
    ] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    let recorded = metrics["final_swd"].as_f64().unwrap();

    let recompute = d2oc()
        .args(["metrics", "--traj"])
        .arg(out_dir.join("trajectories.csv"))
        .arg("--map")
        .arg(out_dir.join("map.csv"))
        .args(["--seed", "11", "--projections", "20"])
        .output()
        .unwrap();
    assert!(recompute.status.success());
    let stdout = String::from_utf8(recompute.stdout).unwrap();
    let value: f64 = stdout.trim().strip_prefix("swd: ").unwrap().parse().unwrap();
    assert_eq!(value.to_bits(), recorded.to_bits());
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, r#"{"n_agentz": 3}"#).unwrap();
    let out = d2oc()
        .args(["run", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_code_three() {
    let out = d2oc()
        .args(["run", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn check_model_reports_the_quadrotor_facts() {
    let out = d2oc()
        .args(["check-model", "--model", "quadrotor"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("states: 12"));
    assert!(stdout.contains("relative degree: 4"));
    assert!(stdout.contains("controllable: true"));
}
