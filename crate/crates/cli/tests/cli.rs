use std::process::{Command, Output};

fn airground(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_airground")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn bandwidth_prints_one_row_per_keypoint_count() {
    let out = stdout(&airground(&["bandwidth", "--n", "128,1024"]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].ends_with("0.29"), "{out}");
    assert!(rows[1].ends_with("2.18"), "{out}");
}

#[test]
fn bad_fps_is_rejected() {
    let o = airground(&["bandwidth", "--fps", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("fps"));
}

#[test]
fn generated_logs_replay_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let listed = stdout(&airground(&["--seed", "4", "generate", "--out", d, "--frames", "6"]));
    assert_eq!(listed.lines().count(), 2);
    let (uav, ugv) = (dir.path().join("uav.aglp"), dir.path().join("ugv.aglp"));
    assert!(uav.exists() && ugv.exists());

    let report_dir = dir.path().join("reports");
    let json = stdout(&airground(&[
        "run",
        "--uav",
        uav.to_str().unwrap(),
        "--ugv",
        ugv.to_str().unwrap(),
        "--mode",
        "reg-only",
        "--out",
        report_dir.to_str().unwrap(),
        "--json",
    ]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["mode"], "reg-only");
    assert_eq!(v["aggregate"]["trials"], 1);
    assert!(report_dir.join("report-reg-only.json").exists());
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "trials = 3\nmode = \"reg-only\"\n[input.scenario]\nframes = 5\n").unwrap();
    let json = stdout(&airground(&["--config", cfg.to_str().unwrap(), "run", "--trials", "1", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["mode"], "reg-only");
    assert_eq!(v["aggregate"]["trials"], 1);
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "trails = 3\n").unwrap();
    let o = airground(&["--config", cfg.to_str().unwrap(), "bandwidth"]);
    assert!(!o.status.success());
}

#[test]
fn scenario_flags_conflict_with_log_input() {
    let o = airground(&["run", "--uav", "a.aglp", "--ugv", "b.aglp", "--frames", "4"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("conflict"));
}

#[test]
fn ablate_lists_requested_modes() {
    let out = stdout(&airground(&["--seed", "2", "ablate", "--modes", "reg-only,reg-stage2", "--trials", "1", "--frames", "5"]));
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert!(rows[0].starts_with("reg-only") && rows[1].starts_with("reg-stage2"));
    assert!(rows.iter().all(|r| r.contains("1/1")), "{out}");
}

#[test]
fn bench_index_reports_exact_recall_when_ef_covers_the_index() {
    let json = stdout(&airground(&["--seed", "9", "bench-index", "--size", "200", "--queries", "20", "--ef", "200", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["recall_at_1"], 1.0);
    assert_eq!(v["size"], 200);
}
