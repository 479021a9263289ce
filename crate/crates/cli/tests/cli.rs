use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = r#"
name = "cli-test"
seed = 5

[protocol]
n = 4
f = 1
sub_blocks = 4
delta = 1000
batch_interval = 500
batch_capacity = 450

[network]
delay = { kind = "fixed", value = 1000 }

[load]
interval = 300

[horizon]
time = 30000
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_raptr-sim"))
}

fn write_scenario(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], scenario: &Path) -> Output {
    bin().args(args).arg("--scenario").arg(scenario).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn run_passes_and_writes_reports() {
    let dir = TempDir::new().unwrap();
    let sc = write_scenario(&dir, "ok.toml", BASE);
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--out"]).arg(&out_dir).arg("--scenario").arg(&sc).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&out);
    assert_eq!(report["safety_ok"], true);
    assert_eq!(report["variant"], "raptr");
    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
    let csv = std::fs::read_to_string(out_dir.join("transactions.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn runs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let sc = write_scenario(&dir, "ok.toml", BASE);
    let a = run(&["run", "--seed", "9", "--variant", "baby-raptr"], &sc);
    let b = run(&["run", "--seed", "9", "--variant", "baby-raptr"], &sc);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(json(&a)["seed"], 9);
}

#[test]
fn invalid_replica_count_exits_2() {
    let dir = TempDir::new().unwrap();
    let sc = write_scenario(&dir, "bad.toml", &BASE.replace("n = 4", "n = 5"));
    let out = run(&["run"], &sc);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("3f + 1"));
}

#[test]
fn availability_below_f_plus_one_exits_2() {
    let dir = TempDir::new().unwrap();
    let sc = write_scenario(&dir, "bad.toml", &BASE.replace("f = 1\n", "f = 1\navailability = 1\n"));
    let out = run(&["run"], &sc);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("availability"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(run(&["run"], &missing).status.code(), Some(2));
    assert_eq!(bin().arg("run").output().unwrap().status.code(), Some(2));
    let sc = write_scenario(&dir, "ok.toml", BASE);
    assert_eq!(run(&["run", "--variant", "hotstuff"], &sc).status.code(), Some(2));
}

#[test]
fn hop_count_mode_needs_fixed_delays() {
    let dir = TempDir::new().unwrap();
    let text = BASE.replace(r#"{ kind = "fixed", value = 1000 }"#, r#"{ kind = "uniform", lo = 100, hi = 1000 }"#);
    let sc = write_scenario(&dir, "uniform.toml", &text);
    assert_eq!(run(&["run", "--hop-count-mode"], &sc).status.code(), Some(2));
    let sc = write_scenario(&dir, "fixed.toml", BASE);
    let out = run(&["run", "--hop-count-mode"], &sc);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["metrics"]["hop_counts"]["consensus"]["p50"], 3.0);
}

#[test]
fn stalled_run_exits_1_with_counterexample() {
    let dir = TempDir::new().unwrap();
    let text =
        format!("{BASE}\n[[faults]]\nkind = \"partition\"\ngroups = [[0, 1], [2, 3]]\nfrom = 0\nuntil = 30000\n");
    let sc = write_scenario(&dir, "split.toml", &text);
    let out_dir = dir.path().join("out");
    let out = bin().args(["run", "--out"]).arg(&out_dir).arg("--scenario").arg(&sc).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("violation"));
    assert_eq!(json(&out)["liveness_ok"], false);
    assert!(out_dir.join("counterexample.json").exists());
}

#[test]
fn campaign_and_compare_summarize() {
    let dir = TempDir::new().unwrap();
    let sc = write_scenario(&dir, "ok.toml", BASE);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["campaign", "--seeds", "4", "--first-seed", "2", "--parallelism", "2", "--out"])
        .arg(&out_dir)
        .arg("--scenario")
        .arg(&sc)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let summary = json(&out);
    assert_eq!(summary["runs"], 4);
    assert_eq!(summary["passed"], 4);
    assert!(out_dir.join("campaign.json").exists());

    let out = run(&["compare"], &sc);
    assert_eq!(out.status.code(), Some(0));
    let rows = json(&out)["rows"].as_array().unwrap().len();
    assert_eq!(rows, 3);
}
