//! Batch commands behind the `dailystudy` binary.
//!
//! A study directory holds `study.conf` (the key/value settings file) and
//! `events.ndjson` (the event log). Every report is computed from those two
//! files alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dailystudy::analytics::{
    payment_lines, render_histogram, render_payments, render_retention, render_tests, submission_histogram,
    test_battery, write_histogram_csv, write_tests_csv, CompletionMatrix, PaymentLine,
};
use dailystudy::config_file::Settings;
use dailystudy::domain::{SchemeId, StudyConfig, StudyEvent};
use dailystudy::gateway::write_ledger_csv;
use dailystudy::payment::PaymentEngine;
use dailystudy::persistence::{compact, load_compacted, read_log_file, replay, write_events, Snapshot};
use dailystudy::sim::{simulate_study, SimOutcome};
use dailystudy::stats::TVariant;

pub const CONFIG_FILE: &str = "study.conf";
pub const LOG_FILE: &str = "events.ndjson";
pub const LEDGER_FILE: &str = "ledger.csv";

#[derive(Debug, Clone)]
pub struct StudyDir {
    root: PathBuf,
}

impl StudyDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join(LOG_FILE)
    }

    pub fn settings(&self) -> Result<Settings> {
        read_settings(&self.config_path())
    }

    pub fn events(&self) -> Result<Vec<StudyEvent>> {
        let path = self.log_path();
        if !path.exists() {
            bail!("no event log at {}", path.display());
        }
        read_log_file(&path).with_context(|| format!("reading {}", path.display()))
    }
}

pub fn read_settings(path: &Path) -> Result<Settings> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Settings::parse(&text).with_context(|| format!("in {}", path.display()))
}

/// Validates `config` and installs it as a fresh study in `dir`.
pub fn init(config: &Path, dir: &StudyDir) -> Result<Settings> {
    let settings = read_settings(config)?;
    if dir.config_path().exists() || dir.log_path().exists() {
        bail!("{} already holds a study", dir.root().display());
    }
    fs::create_dir_all(dir.root()).with_context(|| format!("creating {}", dir.root().display()))?;
    fs::write(dir.config_path(), settings.render())?;
    fs::File::create(dir.log_path())?;
    Ok(settings)
}

/// Runs the simulator and writes its config, log and platform ledger to
/// `dir`. An existing log is only replaced with `overwrite`.
pub fn simulate(settings: &Settings, dir: &StudyDir, overwrite: bool) -> Result<SimOutcome> {
    if dir.log_path().exists() && !overwrite {
        bail!("{} exists; pass --force to replace it", dir.log_path().display());
    }
    let out = simulate_study(&settings.sim, &settings.study).context("simulation failed")?;
    fs::create_dir_all(dir.root())?;
    fs::write(dir.config_path(), settings.render())?;
    let log = fs::File::create(dir.log_path())?;
    write_events(&out.events, std::io::BufWriter::new(log))?;
    write_ledger_csv(&out.ledger, fs::File::create(dir.root().join(LEDGER_FILE))?)?;
    Ok(out)
}

/// The pay table: cumulative pay and equivalent hourly pay after 1, 11,
/// 21, ... measurements for every scheme.
pub fn paytable(config: &StudyConfig) -> Result<String> {
    let engine = PaymentEngine::for_config(config);
    let columns: Vec<u32> = (1..=config.max_measurements).step_by(10).collect();
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "measurements");
    for n in &columns {
        let _ = write!(s, " {n:>7}");
    }
    s.push('\n');
    for (label, hourly) in [("pay", false), ("$/hour", true)] {
        for id in SchemeId::ALL {
            let Some(scheme) = config.scheme(id) else { continue };
            let _ = write!(s, "{:<4}{label:<8}", id.as_str());
            for &n in &columns {
                let cell = if hourly {
                    engine.equivalent_hourly(scheme, n)?.to_string()
                } else {
                    engine.cumulative_pay(scheme, n)?.dollars()
                };
                let _ = write!(s, " {cell:>7}");
            }
            s.push('\n');
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Report {
    Retention,
    Payments,
    Histogram,
    Tests,
    Heatmap,
}

pub fn report(dir: &StudyDir, kind: Report, variant: TVariant) -> Result<String> {
    let settings = dir.settings()?;
    let events = dir.events()?;
    render_report(&events, &settings.study, kind, variant)
}

/// Renders one report from a log. Pure: the same events give the same text.
pub fn render_report(events: &[StudyEvent], study: &StudyConfig, kind: Report, variant: TVariant) -> Result<String> {
    let days = study.duration_days;
    Ok(match kind {
        Report::Retention => render_retention(&CompletionMatrix::from_events(events, days))?,
        Report::Payments => {
            let state = replay(events, study)?;
            render_payments(&payment_lines(&state, study))
        }
        Report::Histogram => render_histogram(&submission_histogram(events)),
        Report::Tests => render_tests(&test_battery(events, days, variant)),
        Report::Heatmap => CompletionMatrix::from_events(events, days).to_text(),
    })
}

/// Writes the CSV artifacts (and the heatmap as a PBM image) to `out`;
/// returns the files written.
pub fn export_csv(dir: &StudyDir, out: &Path, variant: TVariant) -> Result<Vec<PathBuf>> {
    let settings = dir.settings()?;
    let events = dir.events()?;
    let study = &settings.study;
    fs::create_dir_all(out)?;
    let matrix = CompletionMatrix::from_events(&events, study.duration_days);
    let mut written = Vec::new();

    let path = out.join("completion_matrix.csv");
    matrix.write_csv(fs::File::create(&path)?)?;
    written.push(path);

    let path = out.join("histogram.csv");
    write_histogram_csv(&submission_histogram(&events), fs::File::create(&path)?)?;
    written.push(path);

    let path = out.join("tests.csv");
    write_tests_csv(&test_battery(&events, study.duration_days, variant), fs::File::create(&path)?)?;
    written.push(path);

    let path = out.join("payments.csv");
    write_payments_csv(&payment_lines(&replay(&events, study)?, study), &path)?;
    written.push(path);

    let path = out.join("heatmap.pbm");
    fs::write(&path, matrix.to_pbm())?;
    written.push(path);
    Ok(written)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn write_payments_csv(lines: &[PaymentLine], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["worker_id", "scheme", "measurements", "paid", "expected"])?;
    for l in lines {
        w.write_record([
            l.worker_id.as_str(),
            l.scheme.as_str(),
            &l.measurements.to_string(),
            &l.paid.dollars(),
            &l.expected.dollars(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a snapshot of all but the last `keep_tail` events plus the tail,
/// then checks that the pair loads back to the same state as the full log.
pub fn compact_log(dir: &StudyDir, out: &Path, keep_tail: usize) -> Result<Snapshot> {
    let settings = dir.settings()?;
    let events = dir.events()?;
    let snapshot = compact(&events, &settings.study, keep_tail, out)?;
    let (_, reloaded) = load_compacted(out)?;
    if reloaded != replay(&events, &settings.study)? {
        bail!("compacted state in {} differs from the full log", out.display());
    }
    Ok(snapshot)
}
