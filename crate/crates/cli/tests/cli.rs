use std::process::{Command, Output};

fn nncluster(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nncluster"))
        .args(args)
        .output()
        .expect("spawn nncluster")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn trace_replays_the_labelled_example() {
    let o = nncluster(&["trace", "--workers", "4", "--checking"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("stage2 iter3 remove H -> E"));
    assert!(out.contains("group I: GIJK"));
}

#[test]
fn run_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let csv = dir.path().join("c.csv");
    let o = nncluster(&[
        "run",
        "--cells",
        "8",
        "--cycles",
        "2",
        "--workers",
        "4",
        "--report",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["cycles"].as_array().unwrap().len(), 2);
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.starts_with("cycle,n_before,n_after"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# small\ncells = 8\nparcels_per_cell = 5\ncycles = 3\n").unwrap();
    let o = nncluster(&["stats", "--config", path.to_str().unwrap(), "--cycles", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("cycle ")).count(), 1);
    assert!(out.contains("2-way:"));
}

#[test]
fn gen_then_replay_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("pop.pcls");
    let o = nncluster(&["gen", "--cells", "8", "--parcels-per-cell", "10", "--output", snap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("wrote 5120 parcels"));
    let o = nncluster(&["run", "--cells", "8", "--cycles", "2", "--input", snap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("cycle 0: 5120 ->"));
}

#[test]
fn verify_passes_and_flags_a_flipped_tie_break() {
    let base = ["verify", "--cells", "8", "--parcels-per-cell", "40", "--configs", "3", "--workers", "1,4"];
    let o = nncluster(&base);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("pass, "));

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("mismatch.json");
    let mut args = base.to_vec();
    args.extend(["--tie-break", "higher-gid", "--report", report.to_str().unwrap()]);
    let o = nncluster(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("FAIL: seed "));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["mismatch"]["seed"].is_u64());
}

#[test]
fn zero_configs_is_a_vacuous_pass() {
    let o = nncluster(&["verify", "--cells", "8", "--configs", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn config_errors_exit_with_two() {
    for args in [
        &["run", "--cycles", "0"][..],
        &["run", "--workers", "0"],
        &["run", "--cells", "4,4"],
        &["run", "--schedule", "sometimes"],
        &["run", "--input", "/nonexistent/pop.pcls"],
    ] {
        let o = nncluster(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}
