//! Black-box tests of the `transactive` binary: exit codes, file outputs,
//! the golden CSV prefix, and determinism as seen from outside the process.

use std::path::PathBuf;
use std::process::{Command, Output};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transactive"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run_ok(args: &[&str]) -> Output {
    let out = binary().args(args).output().expect("binary spawns");
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn run_writes_csv_and_reports_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let out = run_ok(&[
        "run",
        scenario("two_by_two.scenario").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("iterations"), "summary missing: {stdout}");

    let written = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(written.lines().next(), Some(transactive::output::CSV_HEADER));
    // 500 iterations x 4 agents, plus the header.
    assert_eq!(written.lines().count(), 1 + 500 * 4);
}

#[test]
fn missing_scenario_fails_with_a_usage_error() {
    let out = binary()
        .args(["run", "/nonexistent/nowhere.scenario", "--out", "/tmp/unused.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_scenario_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.scenario");
    // Generator box inverted; the loader must name the field and refuse.
    std::fs::write(
        &path,
        r#"
format_version = 1
max_iterations = 10
alpha0 = 100.0
edges = [[1, 2]]

[[agents]]
id = 1
kind = "generator"
c = 1.0
p_min = 5000.0
p_max = 100.0
t_min = -50.0
t_max = 50.0
initial_power = 200.0

[[agents]]
id = 2
kind = "consumer"
v = 1.0
p_min = 0.0
p_max = 1000.0
t_min = -50.0
t_max = 50.0
initial_power = 500.0
"#,
    )
    .unwrap();
    let csv = dir.path().join("unused.csv");
    let out = binary()
        .args(["run", path.to_str().unwrap(), "--out", csv.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("p_max"), "unhelpful error: {stderr}");
    assert!(!csv.exists(), "no output for a rejected scenario");
}

#[test]
fn reruns_write_byte_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.csv");
    let second = dir.path().join("b.csv");
    let path = scenario("two_by_two.scenario");
    for out in [&first, &second] {
        run_ok(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap(),
        "two runs of the same scenario differ"
    );
}

#[test]
fn plot_flag_writes_the_three_charts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let plots = dir.path().join("plots");
    run_ok(&[
        "run",
        scenario("two_by_two.scenario").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--plot",
        plots.to_str().unwrap(),
    ]);
    for name in ["generation.svg", "demand.svg", "price.svg"] {
        let svg = std::fs::read_to_string(plots.join(name))
            .unwrap_or_else(|e| panic!("{name} missing: {e}"));
        assert!(svg.starts_with("<svg"), "{name} is not an SVG");
    }
}

#[test]
fn verify_reports_a_small_gap_on_a_settled_run() {
    let out = run_ok(&["verify", scenario("two_by_two.scenario").to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout
        .lines()
        .find(|l| l.starts_with("max relative gap:"))
        .unwrap_or_else(|| panic!("no gap line in: {stdout}"));
    let percent: f64 = line
        .trim_start_matches("max relative gap:")
        .trim()
        .trim_end_matches('%')
        .parse()
        .unwrap();
    assert!(percent <= 1.0, "settled run is {percent}% from the optimum");
}

#[test]
fn tree_prints_the_overlay_summary() {
    let out = run_ok(&["tree", scenario("table1.scenario").to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("center: 2"), "{stdout}");
    assert!(stdout.contains("tree diameter: 4"), "{stdout}");
    assert!(stdout.contains("agent 2: root"), "{stdout}");
}

#[test]
fn oracle_prints_the_dispatch_solution() {
    let out = run_ok(&["oracle", scenario("two_by_two.scenario").to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("multiplier:"), "{stdout}");
    assert!(stdout.contains("total generation:"), "{stdout}");
    assert!(stdout.contains("welfare at optimum:"), "{stdout}");
}

/// First five iterations of the bundled ten-agent scenario, checked byte for
/// byte against a committed snapshot. Catches accidental changes to the
/// numerics, the record layout, or float formatting.
#[test]
fn bundled_scenario_matches_the_golden_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    run_ok(&[
        "run",
        scenario("table1.scenario").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    let written = std::fs::read_to_string(&csv).unwrap();
    // Header plus 5 iterations x 10 agents.
    let prefix: String = written.lines().take(51).map(|l| format!("{l}\n")).collect();
    let golden = include_str!("golden/table1_first5.csv");
    assert!(
        prefix == golden,
        "golden prefix drifted; if the change is intended, regenerate \
         tests/golden/table1_first5.csv from a fresh run"
    );
}
