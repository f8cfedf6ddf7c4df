use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dailystudy"))
        .env_remove("DAILYSTUDY_DIR")
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &str = "HI:4,HC:4,LC:4";

#[test]
fn paytable_prints_pay_and_hourly_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let text = stdout(&run(tmp.path(), &["paytable"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].split_whitespace().eq(["measurements", "1", "11", "21", "31"]));
    assert!(lines[3].split_whitespace().eq(["HI", "pay", "1.00", "7.25", "18.50", "34.75"]));
    assert!(lines[4].split_whitespace().eq(["LC", "$/hour", "7.50", "12.19", "12.61", "12.77"]));
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    stdout(&run(&a, &["simulate", "--seed", "42", "--workers", SMALL]));
    stdout(&run(&b, &["simulate", "--seed", "42", "--workers", SMALL]));
    stdout(&run(&c, &["simulate", "--seed", "43", "--workers", SMALL]));
    let read = |d: &Path| std::fs::read(d.join("events.ndjson")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(std::fs::read(a.join("ledger.csv")).unwrap(), std::fs::read(b.join("ledger.csv")).unwrap());
}

#[test]
fn existing_log_is_not_overwritten_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    stdout(&run(tmp.path(), &["simulate", "--workers", SMALL]));
    let again = run(tmp.path(), &["simulate", "--workers", SMALL]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    stdout(&run(tmp.path(), &["simulate", "--workers", SMALL, "--force"]));
}

#[test]
fn retention_is_100_when_everyone_completes_every_day() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("full.conf");
    std::fs::write(
        &config,
        "# everyone completes every day\n\
         sim.workers = HI:3, HC:3, LC:3\n\
         sim.jitter = 0\n\
         profile.base_daily_completion = 1\n\
         profile.p_abandon_after_first = 0\n\
         profile.hazard = 0, 0, 0, 0, 0\n",
    )
    .unwrap();
    let dir = tmp.path().join("study");
    stdout(&run(&dir, &["simulate", "--config", config.to_str().unwrap()]));
    let text = stdout(&run(&dir, &["report", "retention"]));
    let all = text.lines().find(|l| l.starts_with("all")).unwrap();
    assert!(all.split_whitespace().eq(["all", "9", "100.0", "100.0", "0", "0", "0"]), "{all}");
}

#[test]
fn reports_and_exports_are_stable_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    stdout(&run(&dir, &["simulate", "--seed", "7", "--workers", "HI:6,HC:6,LC:6"]));
    for kind in ["retention", "payments", "histogram", "tests", "heatmap"] {
        let first = stdout(&run(&dir, &["report", kind]));
        assert!(!first.is_empty(), "{kind}");
        assert_eq!(first, stdout(&run(&dir, &["report", kind])), "{kind}");
    }
    let payments = stdout(&run(&dir, &["report", "payments"]));
    assert!(payments.contains("0 mismatches"), "{payments}");

    let out1 = tmp.path().join("e1");
    let out2 = tmp.path().join("e2");
    stdout(&run(&dir, &["export", "--format", "csv", "--out", out1.to_str().unwrap()]));
    stdout(&run(&dir, &["export", "--format", "csv", "--out", out2.to_str().unwrap()]));
    for file in ["completion_matrix.csv", "histogram.csv", "tests.csv", "payments.csv", "heatmap.pbm"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        assert!(!a.is_empty(), "{file}");
        assert_eq!(a, std::fs::read(out2.join(file)).unwrap(), "{file}");
    }
    let hist = std::fs::read_to_string(out1.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 145);
}

#[test]
fn compact_writes_snapshot_and_tail() {
    let tmp = tempfile::tempdir().unwrap();
    stdout(&run(tmp.path(), &["simulate", "--workers", SMALL]));
    let text = stdout(&run(tmp.path(), &["compact", "--keep", "25"]));
    assert!(text.starts_with("snapshot at seq "));
    let tail = std::fs::read_to_string(tmp.path().join("compacted/tail.ndjson")).unwrap();
    assert_eq!(tail.lines().count(), 25);
    assert!(tmp.path().join("compacted/snapshot.json").exists());
}

#[test]
fn init_installs_a_valid_config_once() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("study.conf.in");
    std::fs::write(&config, "study_id = pilot\nduration_days = 14\nmax_measurements = 14\n").unwrap();
    let dir = tmp.path().join("pilot");
    let text = stdout(&run(&dir, &["init", config.to_str().unwrap()]));
    assert!(text.contains("pilot") && text.contains("14 days"), "{text}");
    assert!(dir.join("events.ndjson").exists());
    let installed = std::fs::read_to_string(dir.join("study.conf")).unwrap();
    assert!(installed.contains("study_id = pilot"));
    assert!(!run(&dir, &["init", config.to_str().unwrap()]).status.success());
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&tmp.path().join("nowhere"), &["report", "retention"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("study.conf"));

    let config = tmp.path().join("bad.conf");
    std::fs::write(&config, "duration_days = 31\nno_such_key = 1\n").unwrap();
    let bad = run(&tmp.path().join("x"), &["init", config.to_str().unwrap()]);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("line 2") && err.contains("no_such_key"), "{err}");

    let bad_workers = run(tmp.path(), &["simulate", "--workers", "HI:x"]);
    assert!(!bad_workers.status.success());

    // A log with a damaged record is refused rather than half-read.
    let dir = tmp.path().join("s");
    stdout(&run(&dir, &["simulate", "--workers", SMALL]));
    let log = dir.join("events.ndjson");
    let mut bytes = std::fs::read(&log).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&log, bytes).unwrap();
    let corrupt = run(&dir, &["report", "retention"]);
    assert!(!corrupt.status.success());
}

#[test]
fn shipped_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let settings = dailystudy_cli::read_settings(&path).unwrap();
    assert_eq!(settings, dailystudy::config_file::Settings::default());
}
