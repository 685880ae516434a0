//! End-to-end tests of the `vcsim` binary: exit codes, output files and
//! stdout reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn vcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process not killed by signal")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&output.stdout)
        )
    })
}

#[test]
fn validate_accepts_the_bundled_scenarios() {
    for name in ["hybrid.json", "onprem-only.json", "hybrid-parallel.json"] {
        let out = vcsim(&["validate", "--scenario", fixture(name).to_str().unwrap()]);
        assert_eq!(exit_code(&out), 0, "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok:"));
    }
}

#[test]
fn validate_rejects_a_malformed_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, r#"{"sites": []}"#).unwrap();
    let out = vcsim(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn validate_rejects_a_semantically_invalid_scenario() {
    // Structurally fine, but the template asks for more initial workers than
    // the only site can host.
    let mut scenario: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("onprem-only.json")).unwrap())
            .unwrap();
    scenario["sites"][0]["max_instances"] = serde_json::json!(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("overbooked.json");
    std::fs::write(&path, scenario.to_string()).unwrap();
    let out = vcsim(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_scenario_file_is_an_io_error() {
    let out = vcsim(&["run", "--scenario", "/nonexistent/nowhere.json"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let out = vcsim(&["run", "--no-such-flag"]);
    assert_eq!(exit_code(&out), 2);
    let out = vcsim(&["--help"]);
    assert_eq!(exit_code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("vcsim"));
}

#[test]
fn exceeding_the_simulation_horizon_exits_3() {
    let mut scenario: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("onprem-only.json")).unwrap())
            .unwrap();
    scenario["engine"]["max_sim_time"] = serde_json::json!(100.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("horizon.json");
    std::fs::write(&path, scenario.to_string()).unwrap();
    let out = vcsim(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_all_outputs_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcsim(&[
        "run",
        "--scenario",
        fixture("onprem-only.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["events.jsonl", "timeline.csv", "summary.json", "topology.json"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let summary = stdout_json(&out);
    assert!(summary["makespan_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn run_emits_only_the_selected_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = vcsim(&[
        "run",
        "--scenario",
        fixture("onprem-only.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--emit",
        "events,summary",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("events.jsonl").is_file());
    assert!(dir.path().join("summary.json").is_file());
    assert!(!dir.path().join("timeline.csv").exists());
    assert!(!dir.path().join("topology.json").exists());
}

#[test]
fn run_is_reproducible_byte_for_byte() {
    let scenario = fixture("onprem-only.json");
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = vcsim(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--emit",
            "events",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(dir.path().join("events.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1], "equal seeds must replay identically");
}

#[test]
fn seed_override_changes_the_event_log() {
    let scenario = fixture("onprem-only.json");
    let mut logs = Vec::new();
    for seed in ["0", "7"] {
        let dir = tempfile::tempdir().unwrap();
        let out = vcsim(&[
            "run",
            "--scenario",
            scenario.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            dir.path().to_str().unwrap(),
            "--emit",
            "events",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(dir.path().join("events.jsonl")).unwrap());
    }
    assert_ne!(logs[0], logs[1], "different seeds should draw different job durations");
}

#[test]
fn compare_reports_zero_deltas_for_identical_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = fixture("onprem-only.json");
    let out = vcsim(&[
        "compare",
        "--scenario",
        scenario.to_str().unwrap(),
        "--against",
        scenario.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["makespan_delta_s"].as_f64(), Some(0.0));
    assert_eq!(report["busy_delta_s"].as_f64(), Some(0.0));
    assert_eq!(report["cost_delta"].as_f64(), Some(0.0));
    let written = std::fs::read_to_string(dir.path().join("compare.json")).unwrap();
    assert_eq!(written.as_bytes(), out.stdout.as_slice());
}

#[test]
fn compare_shows_the_elastic_cluster_finishing_earlier() {
    let out = vcsim(&[
        "compare",
        "--scenario",
        fixture("onprem-only.json").to_str().unwrap(),
        "--against",
        fixture("hybrid.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert!(
        report["makespan_delta_s"].as_f64().unwrap() < 0.0,
        "the elastic variant should finish earlier"
    );
}

#[test]
fn compare_shows_parallel_provisioning_finishing_earlier() {
    let out = vcsim(&[
        "compare",
        "--scenario",
        fixture("hybrid.json").to_str().unwrap(),
        "--against",
        fixture("hybrid-parallel.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert!(
        report["makespan_delta_s"].as_f64().unwrap() < 0.0,
        "parallel provisioning should shorten the ramp-up"
    );
}

#[test]
fn plan_topology_prints_the_overlay_plan() {
    let out = vcsim(&[
        "plan-topology",
        "--scenario",
        fixture("hybrid.json").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plan = stdout_json(&out);
    for key in ["central_points", "vrouters", "subnets", "tunnels", "routes"] {
        assert!(plan.get(key).is_some(), "plan lacks {key}");
    }
    let hubs: Vec<&str> = plan["central_points"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|v| v.as_str())
        .collect();
    assert_eq!(hubs, ["fe"], "the front end is the overlay hub");
    assert!(
        plan["routes"].as_object().unwrap().contains_key("fe"),
        "the hub has a route table"
    );
}
