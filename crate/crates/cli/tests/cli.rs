use std::path::Path;
use std::process::{Command, Output};

fn splaynet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splaynet"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn run_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = splaynet(
        &["run", "--nodes", "128", "--requests", "32", "--workload", "uniform", "--seed", "1", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["n"], 128);
    assert_eq!(v["m"], 32);
    assert_eq!(v["termination"], "completed");
    assert_eq!(v["completed_splays"], 32);
    assert!(v["round_length"]["p95"].as_u64().unwrap() > 0);
}

#[test]
fn sweep_writes_rows_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "sweep", "--nodes", "64,128", "--requests-frac", "0.25", "--workload", "zipf:1.2", "--seeds", "1..3", "--out",
        "sweep.csv",
    ];
    let out = splaynet(&args, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("n,m,workload,seed,rotations,"));
    // Two cells of three seeds, each followed by a mean row.
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[1].starts_with("64,16,zipf:1.2,1,"));
    assert!(lines[4].starts_with("64,16,zipf:1.2,,") && lines[4].ends_with(",mean"));
    assert!(lines[8].starts_with("128,32,zipf:1.2,,") && lines[8].ends_with(",mean"));

    let again = splaynet(&args[..args.len() - 1].iter().copied().chain(["again.csv"]).collect::<Vec<_>>(), dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read(dir.path().join("again.csv")).unwrap(), text.as_bytes());
}

#[test]
fn csv_to_stdout_and_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = splaynet(
        &["run", "--nodes", "16", "--requests", "2", "--format", "csv", "--log", "events", "--out", "o.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("o.csv")).unwrap().lines().count(), 2);
    let events = std::fs::read_to_string(dir.path().join("o.csv.events")).unwrap();
    assert!(events.lines().any(|l| l.split(',').nth(2) == Some("admit")));
    assert!(events.lines().all(|l| l.splitn(4, ',').count() == 4));

    let out = splaynet(&["run", "--nodes", "16", "--requests", "2", "--format", "csv"], dir.path());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn verify_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = splaynet(&["verify", "--nodes", "15", "--exhaustive-pairs"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "n=15 pairs=210 passed=210 failed=0");
    let out = splaynet(&["verify", "--nodes", "63", "--pairs", "20", "--seed", "3"], dir.path());
    assert!(String::from_utf8(out.stdout).unwrap().contains("pairs=20 passed=20"));
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "--nodes", "10", "--bogus"],
        vec!["run", "--nodes", "10", "--workload", "zipf:-1"],
        vec!["run", "--nodes", "10", "--workload", "gauss"],
        vec!["run", "--nodes", "10", "--detectors", "maybe"],
        vec!["sweep", "--nodes", "10,x"],
        vec!["sweep", "--nodes", "10", "--seeds", "5..1"],
        vec!["run"],
    ] {
        let out = splaynet(&args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = splaynet(&["sweep", "--help"], dir.path());
    let help = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--nodes",
        "--requests",
        "--requests-frac",
        "--workload",
        "--seeds",
        "--max-timeslots",
        "--lockstep-rounds",
        "--super-rounds",
        "--detectors",
        "--out",
        "--format",
        "--log",
    ] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn fired_detector_exits_three_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = splaynet(&["run", "--nodes", "128", "--requests", "64", "--seed", "13", "--out", "r.json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("r.json.diag"), "{stderr}");
    let diag = std::fs::read_to_string(dir.path().join("r.json.diag")).unwrap();
    assert!(diag.contains("loop window"));
    assert!(dir.path().join("r.json").exists());

    let out = splaynet(
        &["run", "--nodes", "128", "--requests", "64", "--seed", "13", "--detectors", "off", "--out", "q.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
}
