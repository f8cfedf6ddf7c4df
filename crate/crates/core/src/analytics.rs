//! Study outcomes computed from the event log: the completion matrix,
//! retention figures, the scheme comparison tests, submission-time
//! histograms, and their CSV and bitmap exports.
//!
//! Everything here is a pure function of the events, so the same log always
//! yields the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    Cents, DeviceId, EventBody, SchemeId, StudyConfig, StudyEvent, WorkerId,
};
use crate::gateway::LedgerKind;
use crate::payment::PaymentEngine;
use crate::state::StudyState;
use crate::stats::{t_test, two_proportion_z, Alternative, TVariant};

pub const HISTOGRAM_BINS: usize = 144;
const BIN_MINUTES: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("the completion matrix has no workers")]
    EmptyMatrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub worker_id: WorkerId,
    pub scheme: SchemeId,
    /// `days[d - 1]` is true when study day `d` has a measurement.
    pub days: Vec<bool>,
}

impl MatrixRow {
    pub fn completed(&self) -> usize {
        self.days.iter().filter(|&&d| d).count()
    }

    /// Length of the run of missed days that ends the window.
    pub fn trailing_missed(&self) -> usize {
        self.days.iter().rev().take_while(|&&d| !d).count()
    }
}

/// Workers by study day, one row per enrolled worker in worker-id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionMatrix {
    pub duration_days: u32,
    pub rows: Vec<MatrixRow>,
}

struct Enrolled {
    worker_id: WorkerId,
    scheme: SchemeId,
}

fn enrolled_devices(events: &[StudyEvent]) -> BTreeMap<DeviceId, Enrolled> {
    let mut out = BTreeMap::new();
    for e in events {
        if let EventBody::EnrollmentApproved {
            device_id, scheme, ..
        } = &e.body
        {
            if let Some(w) = &e.worker_id {
                out.insert(
                    device_id.clone(),
                    Enrolled {
                        worker_id: w.clone(),
                        scheme: *scheme,
                    },
                );
            }
        }
    }
    out
}

impl CompletionMatrix {
    pub fn from_events(events: &[StudyEvent], duration_days: u32) -> Self {
        let enrolled = enrolled_devices(events);
        let mut days: BTreeMap<&str, Vec<bool>> = enrolled
            .keys()
            .map(|d| (d.as_str(), vec![false; duration_days as usize]))
            .collect();
        for e in events {
            if let EventBody::MeasurementSubmitted {
                device_id,
                study_day,
                ..
            } = &e.body
            {
                if let Some(row) = days.get_mut(device_id.as_str()) {
                    if let Some(cell) = row.get_mut(*study_day as usize - 1) {
                        *cell = true;
                    }
                }
            }
        }
        let mut rows: Vec<MatrixRow> = enrolled
            .iter()
            .map(|(device, e)| MatrixRow {
                worker_id: e.worker_id.clone(),
                scheme: e.scheme,
                days: days.remove(device.as_str()).unwrap_or_default(),
            })
            .collect();
        rows.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
        Self {
            duration_days,
            rows,
        }
    }

    pub fn rows_for(&self, scheme: SchemeId) -> impl Iterator<Item = &MatrixRow> {
        self.rows.iter().filter(move |r| r.scheme == scheme)
    }

    /// `worker_id,scheme,d1,...,dN` with 0/1 cells.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["worker_id".to_string(), "scheme".to_string()];
        header.extend((1..=self.duration_days).map(|d| format!("d{d}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.worker_id.clone(), r.scheme.to_string()];
            rec.extend(r.days.iter().map(|&d| if d { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain PBM (P1): one pixel row per worker, black where a measurement
    /// was completed.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n# completion by study day, one row per worker\n{} {}\n", self.duration_days, self.rows.len());
        for r in &self.rows {
            let line: Vec<&str> = r.days.iter().map(|&d| if d { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Terminal rendering: `#` completed, `.` missed, grouped by scheme.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for scheme in [SchemeId::HI, SchemeId::HC, SchemeId::LC] {
            for r in self.rows_for(scheme) {
                let cells: String = r.days.iter().map(|&d| if d { '#' } else { '.' }).collect();
                let _ = writeln!(s, "{scheme} {cells} {:>2} {}", r.completed(), r.worker_id);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionSummary {
    pub workers: usize,
    pub all_days: usize,
    pub over_75: usize,
    pub pct_all_days: f64,
    pub pct_over_75: f64,
    /// Workers whose only measurement is the enrollment one.
    pub dropouts_after_first: usize,
    /// Workers whose window ends with three or more missed days.
    pub terminal_run_workers: usize,
    pub missed_any: usize,
}

/// More than 75% of days, i.e. at least 24 of 31.
fn over_75(completed: usize, duration: u32) -> bool {
    completed * 4 > duration as usize * 3
}

pub fn retention_summary(matrix: &CompletionMatrix) -> Result<RetentionSummary, AnalyticsError> {
    retention_of(matrix.rows.iter(), matrix.duration_days)
}

fn retention_of<'a>(
    rows: impl Iterator<Item = &'a MatrixRow>,
    duration: u32,
) -> Result<RetentionSummary, AnalyticsError> {
    let mut s = RetentionSummary {
        workers: 0,
        all_days: 0,
        over_75: 0,
        pct_all_days: 0.0,
        pct_over_75: 0.0,
        dropouts_after_first: 0,
        terminal_run_workers: 0,
        missed_any: 0,
    };
    for r in rows {
        let done = r.completed();
        s.workers += 1;
        if done == duration as usize {
            s.all_days += 1;
        } else {
            s.missed_any += 1;
        }
        if over_75(done, duration) {
            s.over_75 += 1;
        }
        if done == 1 {
            s.dropouts_after_first += 1;
        }
        if r.trailing_missed() >= 3 {
            s.terminal_run_workers += 1;
        }
    }
    if s.workers == 0 {
        return Err(AnalyticsError::EmptyMatrix);
    }
    s.pct_all_days = 100.0 * s.all_days as f64 / s.workers as f64;
    s.pct_over_75 = 100.0 * s.over_75 as f64 / s.workers as f64;
    Ok(s)
}

/// Retention per scheme, for schemes that have workers.
pub fn retention_by_scheme(matrix: &CompletionMatrix) -> BTreeMap<SchemeId, RetentionSummary> {
    SchemeId::ALL
        .iter()
        .filter_map(|&s| {
            retention_of(matrix.rows_for(s), matrix.duration_days)
                .ok()
                .map(|r| (s, r))
        })
        .collect()
}

/// Measurements completed per enrolled worker, grouped by scheme. With
/// `exclude_single`, workers who stopped after the enrollment measurement
/// are left out.
pub fn measures_completed_samples(
    events: &[StudyEvent],
    exclude_single: bool,
) -> BTreeMap<SchemeId, Vec<u32>> {
    let enrolled = enrolled_devices(events);
    let mut counts: BTreeMap<&str, u32> = enrolled.keys().map(|d| (d.as_str(), 0)).collect();
    for e in events {
        if let EventBody::MeasurementSubmitted { device_id, .. } = &e.body {
            if let Some(c) = counts.get_mut(device_id.as_str()) {
                *c += 1;
            }
        }
    }
    let mut by_worker: Vec<(&WorkerId, SchemeId, u32)> = enrolled
        .iter()
        .map(|(d, e)| (&e.worker_id, e.scheme, counts[d.as_str()]))
        .collect();
    by_worker.sort();
    let mut out: BTreeMap<SchemeId, Vec<u32>> = BTreeMap::new();
    for (_, scheme, n) in by_worker {
        if exclude_single && n == 1 {
            continue;
        }
        out.entry(scheme).or_default().push(n);
    }
    out
}

/// Submissions per ten-minute bin of local time of day. Bin `i` covers
/// minutes `[10i, 10i + 10)` after local midnight.
pub fn submission_histogram(events: &[StudyEvent]) -> Vec<u64> {
    let mut bins = vec![0u64; HISTOGRAM_BINS];
    for e in events {
        if let EventBody::MeasurementSubmitted { local_time, .. } = &e.body {
            bins[time_bin(*local_time)] += 1;
        }
    }
    bins
}

pub fn time_bin(t: chrono::NaiveTime) -> usize {
    use chrono::Timelike;
    ((t.hour() * 60 + t.minute()) / BIN_MINUTES) as usize
}

pub fn write_histogram_csv<W: Write>(bins: &[u64], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_start_minute", "count"])?;
    for (i, c) in bins.iter().enumerate() {
        w.write_record([(i as u32 * BIN_MINUTES).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Median of a sample of counts (mean of the middle pair for even sizes).
pub fn median(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m] as f64
    } else {
        (v[m - 1] + v[m]) as f64 / 2.0
    }
}

/// One line of the scheme comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub variable: String,
    pub test: String,
    pub scheme_1: SchemeId,
    pub scheme_2: SchemeId,
    pub n_1: usize,
    pub n_2: usize,
    pub variant: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Why the p-value is missing or forced, if it is.
    pub note: String,
}

impl TestRow {
    pub fn comparison(&self) -> String {
        format!("{} ({}): {} vs {}", self.variable, self.test, self.scheme_1, self.scheme_2)
    }
}

/// The scheme pairs compared, in table order.
pub const PAIRS: [(SchemeId, SchemeId); 3] = [
    (SchemeId::HI, SchemeId::HC),
    (SchemeId::HI, SchemeId::LC),
    (SchemeId::HC, SchemeId::LC),
];

/// Runs the four comparisons (drop out after first, measures completed
/// two-tailed and one-tailed, completed every day) for each scheme pair.
/// Measures-completed tests exclude workers who dropped out after the
/// enrollment measurement.
pub fn test_battery(events: &[StudyEvent], duration_days: u32, variant: TVariant) -> Vec<TestRow> {
    let matrix = CompletionMatrix::from_events(events, duration_days);
    let samples = measures_completed_samples(events, true);
    let variant_name = match variant {
        TVariant::Welch => "welch",
        TVariant::Pooled => "pooled",
    };
    let group = |s: SchemeId| -> Vec<&MatrixRow> { matrix.rows_for(s).collect() };
    let mut rows = Vec::new();

    let proportion = |variable: &str,
                      test: &str,
                      alt: Alternative,
                      hit: &dyn Fn(&MatrixRow) -> bool,
                      rows: &mut Vec<TestRow>| {
        for (a, b) in PAIRS {
            let (ga, gb) = (group(a), group(b));
            let sa = ga.iter().filter(|r| hit(r)).count() as u64;
            let sb = gb.iter().filter(|r| hit(r)).count() as u64;
            let result = two_proportion_z::<f64>(sa, ga.len() as u64, sb, gb.len() as u64, alt);
            rows.push(row(variable, test, a, b, ga.len(), gb.len(), "pooled-proportion", result));
        }
    };
    proportion(
        "Drop Out After First",
        "two-proportion z, two-sided",
        Alternative::TwoSided,
        &|r| r.completed() == 1,
        &mut rows,
    );
    for (test, alt) in [
        ("t-test, two-tailed", Alternative::TwoSided),
        ("t-test, one-tailed scheme 1 > scheme 2", Alternative::Greater),
    ] {
        for (a, b) in PAIRS {
            let to_f = |s: SchemeId| -> Vec<f64> {
                samples
                    .get(&s)
                    .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                    .unwrap_or_default()
            };
            let (xa, xb) = (to_f(a), to_f(b));
            let result = t_test(&xa, &xb, alt, variant);
            rows.push(row("Measures Completed", test, a, b, xa.len(), xb.len(), variant_name, result));
        }
    }
    proportion(
        "Completed Every Day",
        "two-proportion z, scheme 1 > scheme 2",
        Alternative::Greater,
        &|r| r.completed() == duration_days as usize,
        &mut rows,
    );
    rows
}

#[allow(clippy::too_many_arguments)]
fn row(
    variable: &str,
    test: &str,
    a: SchemeId,
    b: SchemeId,
    n_1: usize,
    n_2: usize,
    variant: &str,
    result: Result<crate::stats::TestOutcome<f64>, crate::stats::StatsError>,
) -> TestRow {
    let (statistic, p_value, note) = match result {
        Ok(o) if o.degenerate => (Some(o.statistic), Some(o.p_value), "degenerate input, p forced to 1".into()),
        Ok(o) => (Some(o.statistic), Some(o.p_value), String::new()),
        Err(e) => (None, None, e.to_string()),
    };
    TestRow {
        variable: variable.into(),
        test: test.into(),
        scheme_1: a,
        scheme_2: b,
        n_1,
        n_2,
        variant: variant.into(),
        statistic,
        p_value,
        note,
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.digits$}"))
}

/// `comparison,variant,statistic,p_value`.
pub fn write_tests_csv<W: Write>(rows: &[TestRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["comparison", "variant", "statistic", "p_value"])?;
    for r in rows {
        w.write_record([
            r.comparison(),
            r.variant.clone(),
            fmt_opt(r.statistic, 6),
            fmt_opt(r.p_value, 6),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// What each worker was paid according to the log, next to what the
/// payment rules say they should have been paid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentLine {
    pub worker_id: WorkerId,
    pub scheme: SchemeId,
    pub measurements: u32,
    pub paid: Cents,
    pub expected: Cents,
}

pub fn payment_lines(state: &StudyState, config: &StudyConfig) -> Vec<PaymentLine> {
    let engine = PaymentEngine::for_config(config);
    let mut paid: BTreeMap<&str, Cents> = BTreeMap::new();
    for e in &state.ledger {
        if matches!(e.kind, LedgerKind::HitPayment | LedgerKind::Bonus) {
            *paid.entry(e.worker_id.as_str()).or_default() += e.amount;
        }
    }
    let mut out: Vec<PaymentLine> = state
        .participants
        .values()
        .filter_map(|p| {
            let worker = p.worker_id.clone()?;
            let scheme_id = p.scheme_id?;
            let scheme = config.scheme(scheme_id)?;
            let n = p.measurements();
            Some(PaymentLine {
                paid: paid.get(worker.as_str()).copied().unwrap_or_default(),
                expected: engine.cumulative_pay(scheme, n.max(1)).unwrap_or_default(),
                worker_id: worker,
                scheme: scheme_id,
                measurements: n,
            })
        })
        .collect();
    out.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
    out
}

pub fn render_retention(matrix: &CompletionMatrix) -> Result<String, AnalyticsError> {
    let all = retention_summary(matrix)?;
    let mut s = String::new();
    let line = |s: &mut String, label: &str, r: &RetentionSummary| {
        let _ = writeln!(
            s,
            "{label:<6} {:>5} {:>8.1} {:>8.1} {:>10} {:>9} {:>9}",
            r.workers,
            r.pct_all_days,
            r.pct_over_75,
            r.dropouts_after_first,
            r.missed_any,
            r.terminal_run_workers
        );
    };
    let _ = writeln!(
        s,
        "{:<6} {:>5} {:>8} {:>8} {:>10} {:>9} {:>9}",
        "scheme", "n", "all%", ">75%", "only-first", "missed", "term-run"
    );
    for (scheme, r) in retention_by_scheme(matrix) {
        line(&mut s, scheme.as_str(), &r);
    }
    line(&mut s, "all", &all);
    Ok(s)
}

pub fn render_payments(lines: &[PaymentLine]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<6} {:>5} {:>9} {:>9}  ok", "worker", "scheme", "n", "paid", "expected");
    let mut mismatches = 0;
    let mut total = Cents::ZERO;
    for l in lines {
        let ok = l.paid == l.expected;
        mismatches += usize::from(!ok);
        total += l.paid;
        let _ = writeln!(
            s,
            "{:<12} {:<6} {:>5} {:>9} {:>9}  {}",
            l.worker_id,
            l.scheme,
            l.measurements,
            l.paid.dollars(),
            l.expected.dollars(),
            if ok { "yes" } else { "NO" }
        );
    }
    let _ = writeln!(s, "total paid {total}, {} workers, {mismatches} mismatches", lines.len());
    s
}

pub fn render_histogram(bins: &[u64]) -> String {
    let max = bins.iter().copied().max().unwrap_or(0).max(1);
    let mut s = String::new();
    for (i, &c) in bins.iter().enumerate() {
        let minutes = i as u32 * BIN_MINUTES;
        let bar = "*".repeat(((c * 50).div_ceil(max)) as usize);
        let _ = writeln!(s, "{:02}:{:02} {c:>5} {bar}", minutes / 60, minutes % 60);
    }
    s
}

pub fn render_tests(rows: &[TestRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:<40} {:<3} {:<3} {:>4} {:>4} {:>10} {:>8} {:>4} {:>4}",
        "variable", "test", "s1", "s2", "n1", "n2", "statistic", "p", "5%", "10%"
    );
    for r in rows {
        let sig = |level: f64| match r.p_value {
            Some(p) if p < level => "yes",
            Some(_) => "no",
            None => "NA",
        };
        let _ = writeln!(
            s,
            "{:<22} {:<40} {:<3} {:<3} {:>4} {:>4} {:>10} {:>8} {:>4} {:>4}{}",
            r.variable,
            r.test,
            r.scheme_1,
            r.scheme_2,
            r.n_1,
            r.n_2,
            fmt_opt(r.statistic, 4),
            fmt_opt(r.p_value, 4),
            sig(0.05),
            sig(0.10),
            if r.note.is_empty() { String::new() } else { format!("  ({})", r.note) }
        );
    }
    s
}
