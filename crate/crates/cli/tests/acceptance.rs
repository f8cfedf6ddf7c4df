//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any check fails, except for the single documented pay-table
//! cell that cannot be reproduced.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use chrono_tz::Tz;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use dailystudy::analytics::{retention_summary, submission_histogram, test_battery, median, CompletionMatrix, MatrixRow};
use dailystudy::clock::{Clock, VirtualClock};
use dailystudy::domain::{
    local_instant, Cents, EventBody, NotificationKind, PaymentScheme, SchemeId, StudyConfig, StudyEvent,
};
use dailystudy::gateway::{AssignmentStatus, FaultConfig, FaultMode, LedgerKind, MockCrowd, MockPush};
use dailystudy::payment::PaymentEngine;
use dailystudy::persistence::{read_log_file, replay, write_events, EventStore};
use dailystudy::service::{ServiceError, Study};
use dailystudy::sim::{evaluate, generate_payload, sample_enrollment_request, simulate_study, BehaviorProfile, SimConfig, SimOutcome, Targets};
use dailystudy::state::{CodeState, NotificationState, StudyState};
use dailystudy::stats::{t_test, two_proportion_z, Alternative, TVariant};
use dailystudy_cli::{render_report, Report};

enum Verdict {
    Pass(String),
    Fail(String),
    /// Fails for a reason recorded in the decisions ledger.
    KnownFail(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// A finished scenario, kept for the replay check.
struct Scenario {
    name: String,
    config: StudyConfig,
    events: Vec<StudyEvent>,
    live: StudyState,
}

fn main() {
    let mut scenarios = Vec::new();
    let mut hard_failures = 0;
    let mut lines: Vec<(usize, String)> = Vec::new();
    let mut report = |id: &str, title: &str, started: Instant, v: Verdict| {
        let ms = started.elapsed().as_millis();
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                hard_failures += 1;
                ("FAIL", d)
            }
            Verdict::KnownFail(d) => ("FAIL", format!("{d} (known, see decisions ledger)")),
        };
        let order = id[2..].parse().unwrap_or(usize::MAX);
        lines.push((order, format!("{id:<4} {tag}  {title}: {detail} [{ms} ms]")));
    };
    let plain = |r: Check| match r {
        Ok(d) => Verdict::Pass(d),
        Err(d) => Verdict::Fail(d),
    };

    let t = Instant::now();
    report("AC1", "pay table reproduction", t, ac1_pay_table());
    let t = Instant::now();
    report("AC2", "increasing-scheme interpretation", t, plain(ac2_bonus_index()));

    // The full-size simulated study is shared by several checks.
    let t = Instant::now();
    let (full_outcome, full_check) = match ac5_conservation(&mut scenarios) {
        Ok((out, detail)) => (Some(out), Ok(detail)),
        Err(e) => (None, Err(e)),
    };
    report("AC5", "end-to-end conservation", t, plain(full_check));

    let t = Instant::now();
    report("AC3", "statistical oracle equivalence", t, plain(ac3_stats(full_outcome.as_ref())));
    let t = Instant::now();
    report("AC4", "reminder schedule and protocol", t, plain(ac4_scheduler(&mut scenarios)));
    let t = Instant::now();
    report("AC6", "reminder spikes in submission times", t, plain(ac6_spikes(full_outcome.as_ref(), &mut scenarios)));
    let t = Instant::now();
    report("AC7", "retention calibration", t, plain(ac7_retention()));
    let t = Instant::now();
    report("AC8", "retention fixture self-consistency", t, plain(ac8_fixture()));
    let t = Instant::now();
    report("AC9", "enrollment protocol under faults", t, plain(ac9_enrollment(&mut scenarios)));
    let t = Instant::now();
    report("AC10", "replay equivalence", t, plain(ac10_replay(&scenarios)));

    lines.sort();
    for (_, line) in &lines {
        println!("{line}");
    }
    if hard_failures > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- AC1

fn ac1_pay_table() -> Verdict {
    let engine = PaymentEngine::default();
    let schemes = [
        ("LC", PaymentScheme::low_constant()),
        ("HC", PaymentScheme::high_constant()),
        ("HI", PaymentScheme::high_increasing()),
    ];
    let pay: [[&str; 4]; 3] = [
        ["1.00", "9.80", "18.60", "27.40"],
        ["1.00", "12.30", "23.60", "34.90"],
        ["1.00", "7.25", "18.50", "34.75"],
    ];
    let hourly: [[&str; 4]; 3] = [
        ["7.50", "12.19", "12.61", "12.77"],
        ["7.50", "15.30", "16.00", "16.23"],
        ["7.50", "9.02", "12.55", "16.20"],
    ];
    let started = Instant::now();
    let mut mismatches = Vec::new();
    for (row, (name, scheme)) in schemes.iter().enumerate() {
        for (col, n) in [1u32, 11, 21, 31].into_iter().enumerate() {
            let p = engine.cumulative_pay(scheme, n).map(Cents::dollars).unwrap_or_default();
            if p != pay[row][col] {
                mismatches.push(format!("{name} pay n={n}: {p} vs {}", pay[row][col]));
            }
            let h = engine.equivalent_hourly(scheme, n).map(|h| h.to_string()).unwrap_or_default();
            if h != hourly[row][col] {
                mismatches.push(format!("{name} hourly n={n}: {h} vs {}", hourly[row][col]));
            }
        }
    }
    let elapsed = started.elapsed();
    let matched = 24 - mismatches.len();
    if elapsed.as_secs_f64() >= 1.0 {
        return Verdict::Fail(format!("took {elapsed:?}"));
    }
    match mismatches.as_slice() {
        [] => Verdict::Pass(format!("24/24 cells in {elapsed:?}")),
        // The printed HC hourly cell at 31 measurements is inconsistent with
        // the stated time model (34.90 / 2.1453 h = 16.27); every other cell
        // follows from it.
        [only] if only == "HC hourly n=31: 16.27 vs 16.23" => {
            Verdict::KnownFail(format!("{matched}/24 cells; {only}"))
        }
        _ => Verdict::Fail(format!("{matched}/24 cells; {}", mismatches.join("; "))),
    }
}

// ---------------------------------------------------------------- AC2

fn ac2_bonus_index() -> Check {
    let engine = PaymentEngine::default();
    let hi = PaymentScheme::high_increasing();
    let printed = [(11u32, 725i64), (21, 1850), (31, 3475)];
    let mut lines = Vec::new();
    for (n, expected) in printed {
        // Enrollment pays measurement 1; bonus j (for measurement j + 1)
        // is 40 + 5 (j - 1).
        let by_index: i64 = 100 + (1..n as i64).map(|j| 40 + 5 * (j - 1)).sum::<i64>();
        // Literal reading: measurement i is paid 40 + 5 (i - 1), starting
        // with the first follow-up measurement counted as i = 2.
        let literal: i64 = 100 + (2..=n as i64).map(|i| 40 + 5 * (i - 1)).sum::<i64>();
        ensure(by_index == expected, || format!("n={n}: by index {by_index} vs printed {expected}"))?;
        ensure(engine.cumulative_pay(&hi, n) == Ok(Cents(expected)), || format!("engine disagrees at n={n}"))?;
        ensure(literal != expected, || format!("literal reading also matches at n={n}"))?;
        lines.push(format!("n={n} {}", Cents(literal).dollars()));
    }
    Ok(format!("bonus-index sums match 7.25/18.50/34.75; literal reading gives {} and is rejected", lines.join(", ")))
}

// ---------------------------------------------------------------- AC3

fn ac3_stats(full: Option<&SimOutcome>) -> Check {
    let normal = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let alts = [Alternative::TwoSided, Alternative::Greater, Alternative::Less];
    let tail = |stat: f64, alt: Alternative, sf: &dyn Fn(f64) -> f64| match alt {
        Alternative::TwoSided => (2.0 * sf(stat.abs())).min(1.0),
        Alternative::Greater => sf(stat),
        Alternative::Less => sf(-stat),
    };
    let mut worst: f64 = 0.0;
    let fixtures = 25;
    for _ in 0..fixtures {
        let (na, nb) = (rng.random_range(20..200u64), rng.random_range(20..200u64));
        let (sa, sb) = (rng.random_range(1..na), rng.random_range(1..nb));
        let (fa, fb) = (sa as f64 / na as f64, sb as f64 / nb as f64);
        let pooled = (sa + sb) as f64 / (na + nb) as f64;
        let z = (fa - fb) / (pooled * (1.0 - pooled) * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
        for alt in alts {
            let ours = two_proportion_z::<f64>(sa, na, sb, nb, alt).map_err(|e| e.to_string())?;
            let p = tail(z, alt, &|x| normal.sf(x));
            worst = worst.max((ours.p_value - p).abs()).max((ours.statistic - z).abs());
        }

        let a: Vec<f64> = (0..rng.random_range(3..60)).map(|_| f64::from(rng.random_range(1..32u32))).collect();
        let b: Vec<f64> = (0..rng.random_range(3..90)).map(|_| f64::from(rng.random_range(1..32u32))).collect();
        let (t, df) = welch(&a, &b);
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| e.to_string())?;
        for alt in alts {
            let ours = t_test(&a, &b, alt, TVariant::Welch).map_err(|e| e.to_string())?;
            let p = tail(t, alt, &|x| dist.sf(x));
            worst = worst.max((ours.p_value - p).abs()).max((ours.statistic - t).abs());
        }
    }
    ensure(worst < 1e-9, || format!("largest deviation from reference {worst:e}"))?;

    // Permutation estimate of the two-sided p-value.
    let mut perm_worst: f64 = 0.0;
    for shift in [0.0, 0.3, 0.6] {
        let gauss = |rng: &mut ChaCha8Rng| {
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            (-2.0 * (1.0 - u).ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        };
        let a: Vec<f64> = (0..30).map(|_| gauss(&mut rng) + shift).collect();
        let b: Vec<f64> = (0..30).map(|_| gauss(&mut rng)).collect();
        let observed = t_test(&a, &b, Alternative::TwoSided, TVariant::Welch).map_err(|e| e.to_string())?;
        let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let rounds = 10_000;
        let mut extreme = 0u32;
        for _ in 0..rounds {
            all.shuffle(&mut rng);
            let (x, y) = all.split_at(a.len());
            if welch(x, y).0.abs() >= observed.statistic.abs() - 1e-12 {
                extreme += 1;
            }
        }
        perm_worst = perm_worst.max((f64::from(extreme) / f64::from(rounds) - observed.p_value).abs());
    }
    ensure(perm_worst < 0.02, || format!("permutation estimate off by {perm_worst:.4}"))?;

    let full = full.ok_or("no simulated study to build the battery from")?;
    let rows = test_battery(&full.events, full.study_config.duration_days, TVariant::Welch);
    ensure(rows.len() == 12, || format!("{} battery rows", rows.len()))?;
    let pairs: Vec<_> = rows[..3].iter().map(|r| (r.scheme_1, r.scheme_2, r.n_1, r.n_2)).collect();
    ensure(
        pairs
            == [
                (SchemeId::HI, SchemeId::HC, 44, 54),
                (SchemeId::HI, SchemeId::LC, 44, 89),
                (SchemeId::HC, SchemeId::LC, 54, 89),
            ],
        || format!("battery pairs {pairs:?}"),
    )?;
    Ok(format!(
        "{} fixtures within {worst:.1e}, permutation within {perm_worst:.4}, battery HI/HC/LC n=44/54/89 (published p-values not reproducible without raw data)",
        fixtures * 2
    ))
}

fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let moments = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (n, m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let (na, ma, va) = moments(a);
    let (nb, mb, vb) = moments(b);
    let se2 = va / na + vb / nb;
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    ((ma - mb) / se2.sqrt(), df)
}

// ---------------------------------------------------------------- AC4

struct Rig {
    clock: Arc<VirtualClock>,
    crowd: Arc<MockCrowd>,
    study: Study,
    hit: String,
    rng: ChaCha8Rng,
}

impl Rig {
    fn new(start: DateTime<Utc>, crowd_faults: FaultConfig, seed: u64) -> Result<Self, String> {
        let clock = Arc::new(VirtualClock::new(start));
        let dyn_clock: Arc<dyn Clock> = clock.clone();
        let crowd = Arc::new(MockCrowd::new(dyn_clock.clone(), crowd_faults, seed));
        let push = Arc::new(MockPush::new(dyn_clock.clone(), FaultConfig::default(), seed + 1));
        let mut study = Study::new(EventStore::in_memory(StudyConfig::default()), crowd.clone(), push, dyn_clock);
        let mut hit = None;
        for _ in 0..100 {
            match study.publish_enrollment_hit() {
                Ok(h) | Err(ServiceError::DuplicateHit(h)) => {
                    hit = Some(h);
                    break;
                }
                Err(ServiceError::Gateway(_)) => continue,
                Err(e) => return Err(e.to_string()),
            }
        }
        Ok(Self {
            clock,
            crowd,
            study,
            hit: hit.ok_or("could not publish the enrollment HIT")?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn issue(&mut self, device: &str, tz: Tz) -> Result<String, String> {
        let req = sample_enrollment_request(&mut self.rng, tz, self.clock.now(), 5);
        self.study.issue_code(device, req).map(|c| c.code).map_err(|e| e.to_string())
    }

    fn enroll(&mut self, device: &str, worker: &str, tz: Tz) -> Result<(), String> {
        let code = self.issue(device, tz)?;
        let asg = self.crowd.submit_assignment(&self.hit, worker, &code).map_err(|e| e.to_string())?;
        self.study.validate_submission(worker, &asg, &code).map_err(|e| e.to_string())?;
        Ok(())
    }

    fn submit(&mut self, device: &str, at: DateTime<Utc>) -> Result<(), ServiceError> {
        self.clock.set(at);
        let payload = generate_payload(&mut self.rng, 5);
        self.study.submit_measurement(device, payload, at).map(|_| ())
    }

    fn tick(&mut self, at: DateTime<Utc>) -> Result<usize, String> {
        self.clock.set(at);
        self.study.tick(at).map(|d| d.len()).map_err(|e| e.to_string())
    }

    fn sent(&self, device: &str) -> Vec<(u32, NotificationKind, DateTime<Utc>)> {
        let state = self.study.state();
        self.study
            .store()
            .events()
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::NotificationSent { id, device_id } if device_id == device => {
                    let n = &state.notifications[id];
                    Some((n.study_day, n.kind, e.at))
                }
                _ => None,
            })
            .collect()
    }

    fn finish(self, name: &str) -> Scenario {
        Scenario {
            name: name.to_string(),
            config: self.study.config().clone(),
            events: self.study.store().events().to_vec(),
            live: self.study.state().clone(),
        }
    }
}

fn day(n: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 3, n).expect("valid date")
}

fn local(tz: Tz, d: u32, h: u32, m: u32) -> DateTime<Utc> {
    local_instant(tz, day(d), NaiveTime::from_hms_opt(h, m, 0).expect("valid time"))
}

fn utc(s: &str) -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(s).expect("valid timestamp").with_timezone(&Utc)
}

fn ac4_scheduler(scenarios: &mut Vec<Scenario>) -> Check {
    const EST: Tz = chrono_tz::Etc::GMTPlus5;
    let e = |e: ServiceError| e.to_string();

    // 10:00 local on day 2 schedules day 3 at 09:00 and 19:00 local.
    let mut rig = Rig::new(local(EST, 1, 8, 0), FaultConfig::default(), 1)?;
    rig.enroll("dev", "W", EST)?;
    rig.submit("dev", local(EST, 2, 10, 0)).map_err(e)?;
    let mut next: Vec<_> = rig
        .study
        .state()
        .pending_notifications()
        .filter(|n| n.study_day == 3)
        .map(|n| (n.kind, n.fire_at))
        .collect();
    next.sort();
    ensure(
        next == [
            (NotificationKind::Morning, utc("2021-03-03T14:00:00Z")),
            (NotificationKind::EveningConditional, utc("2021-03-04T00:00:00Z")),
        ],
        || format!("day 3 schedule {next:?}"),
    )?;

    // A 12:00 submission on day 3 suppresses the evening reminder.
    ensure(rig.tick(utc("2021-03-03T14:00:00Z"))? == 1, || "morning reminder not sent".into())?;
    rig.submit("dev", local(EST, 3, 12, 0)).map_err(e)?;
    ensure(rig.tick(utc("2021-03-04T00:00:00Z"))? == 0, || "evening reminder sent after submission".into())?;
    let evening = rig
        .study
        .state()
        .notifications
        .values()
        .find(|n| n.study_day == 3 && n.kind == NotificationKind::EveningConditional)
        .map(|n| n.state);
    ensure(evening == Some(NotificationState::Suppressed), || format!("evening state {evening:?}"))?;
    scenarios.push(rig.finish("reminder schedule"));

    // An 08:30 submission cancels that day's 09:00 reminder.
    let mut rig = Rig::new(local(EST, 1, 8, 0), FaultConfig::default(), 2)?;
    rig.enroll("dev", "W", EST)?;
    rig.submit("dev", local(EST, 2, 8, 30)).map_err(e)?;
    ensure(rig.tick(local(EST, 2, 23, 0))? == 0, || "reminder sent after an early submission".into())?;
    let morning = rig
        .study
        .state()
        .notifications
        .values()
        .find(|n| n.study_day == 2 && n.kind == NotificationKind::Morning)
        .map(|n| n.state);
    ensure(morning == Some(NotificationState::Cancelled), || format!("morning state {morning:?}"))?;
    scenarios.push(rig.finish("early submission"));

    // Random interleavings of ticks and submissions.
    let zones = [EST, chrono_tz::Asia::Tokyo, chrono_tz::America::Los_Angeles, chrono_tz::Australia::Sydney];
    let trials = 10_000u64;
    let mut dispatched = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let tz = zones[rng.random_range(0..zones.len())];
        let mut rig = Rig::new(local(tz, 1, 7, 0), FaultConfig::default(), trial)?;
        rig.enroll("dev", "W", tz)?;
        let start = rig.clock.now();
        let mut steps: Vec<(DateTime<Utc>, bool)> = (0..rng.random_range(3..16))
            .map(|_| (start + Duration::minutes(rng.random_range(0..4 * 24 * 60)), false))
            .collect();
        for d in 2..=4 {
            if rng.random_bool(0.6) {
                steps.push((local(tz, d, rng.random_range(0..24), rng.random_range(0..60)), true));
            }
        }
        steps.sort();
        for (at, is_submit) in steps {
            if is_submit {
                let _ = rig.submit("dev", at);
            } else {
                rig.tick(at)?;
            }
        }
        let sent = rig.sent("dev");
        dispatched += sent.len();
        let records = rig.study.state().measurements.get("dev").cloned().unwrap_or_default();
        for d in 1..=5 {
            let n = sent.iter().filter(|(sd, _, _)| *sd == d).count();
            ensure(n <= 2, || format!("trial {trial}: {n} reminders on day {d}"))?;
            if let Some(done) = records.get(&d) {
                let late = sent.iter().any(|(sd, _, at)| *sd == d && *at > done.submitted_at);
                ensure(!late, || format!("trial {trial}: reminder after day {d} was done"))?;
            }
        }
    }
    Ok(format!(
        "14:00Z/00:00Z schedule, suppression and cancellation hold; {trials} random orderings, {dispatched} dispatches, none over 2 per worker-day"
    ))
}

// ---------------------------------------------------------------- AC5

fn ac5_conservation(scenarios: &mut Vec<Scenario>) -> Result<(SimOutcome, String), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("study");
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dailystudy"))
        .env_remove("DAILYSTUDY_DIR")
        .args(["--dir", dir.to_str().ok_or("temp path")?, "simulate", "--seed", "42", "--workers", "HI:44,HC:54,LC:89"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    ensure(elapsed.as_secs_f64() < 30.0, || format!("simulate took {elapsed:?}"))?;

    let settings = dailystudy_cli::read_settings(&dir.join("study.conf")).map_err(|e| e.to_string())?;
    let events = read_log_file(&dir.join("events.ndjson")).map_err(|e| e.to_string())?;
    let state = replay(&events, &settings.study).map_err(|e| e.to_string())?;
    let paid = ledger_from_csv(&dir.join("ledger.csv"))?;

    let engine = PaymentEngine::for_config(&settings.study);
    let mut workers = 0;
    for p in state.participants.values() {
        let (Some(worker), Some(scheme)) = (&p.worker_id, p.scheme_id) else { continue };
        workers += 1;
        let n = state.records(&p.device_id).count() as u32;
        let scheme = settings.study.scheme(scheme).ok_or("unknown scheme")?;
        let expected = engine.cumulative_pay(scheme, n).map_err(|e| e.to_string())?;
        let got = paid.get(worker.as_str()).copied().unwrap_or_default();
        ensure(got == expected, || format!("{worker}: ledger {got} vs {expected} for {n} measurements"))?;
    }
    ensure(workers == 187, || format!("{workers} enrolled workers"))?;

    // The same run in process, for the duplicate counts.
    let live = simulate_study(&settings.sim, &settings.study).map_err(|e| e.to_string())?;
    ensure(live.events == events, || "in-process run differs from the binary's log".into())?;
    ensure(live.duplicates_attempted > 0, || "no duplicate submissions were injected".into())?;
    ensure(live.duplicates_rejected == live.duplicates_attempted, || {
        format!("{} of {} duplicates accepted", live.duplicates_attempted - live.duplicates_rejected, live.duplicates_attempted)
    })?;
    let bonuses = live.ledger.iter().filter(|e| e.kind == LedgerKind::Bonus).count();
    let measurements = events.iter().filter(|e| matches!(e.body, EventBody::MeasurementSubmitted { .. })).count();
    ensure(bonuses == measurements - workers, || format!("{bonuses} bonuses for {measurements} measurements"))?;
    let keys: BTreeSet<&str> = live.ledger.iter().map(|e| e.idempotency_key.as_str()).collect();
    ensure(keys.len() == live.ledger.len(), || "repeated idempotency key in the ledger".into())?;

    scenarios.push(Scenario {
        name: "simulate --seed 42".into(),
        config: live.study_config.clone(),
        events: live.events.clone(),
        live: live.state.clone(),
    });
    let detail = format!(
        "187 workers paid exactly by the rules, {} duplicates rejected with no extra ledger entries, simulate took {:.1}s",
        live.duplicates_attempted,
        elapsed.as_secs_f64()
    );
    Ok((live, detail))
}

fn ledger_from_csv(path: &Path) -> Result<BTreeMap<String, Cents>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut paid = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let (worker, kind, cents) = (&row[0], &row[1], &row[2]);
        if kind == "HitPayment" || kind == "Bonus" {
            let cents: i64 = cents.parse().map_err(|e| format!("amount `{cents}`: {e}"))?;
            *paid.entry(worker.to_string()).or_insert(Cents::ZERO) += Cents(cents);
        }
    }
    Ok(paid)
}

// ---------------------------------------------------------------- AC6

fn spikes(events: &[StudyEvent]) -> (u64, u64, f64, u64) {
    let bins = submission_histogram(events);
    let others: Vec<u64> = bins.iter().enumerate().filter(|(i, _)| *i != 54 && *i != 114).map(|(_, &c)| c).collect();
    (bins[54], bins[114], median(&others), bins.iter().copied().max().unwrap_or(0))
}

fn ac6_spikes(full: Option<&SimOutcome>, scenarios: &mut Vec<Scenario>) -> Check {
    let study = StudyConfig::default();
    let mut lines = Vec::new();
    let mut runs: Vec<(u64, Vec<StudyEvent>)> = Vec::new();
    if let Some(full) = full {
        runs.push((42, full.events.clone()));
    }
    for seed in [7u64, 2024] {
        let out = simulate_study(&SimConfig { seed, ..SimConfig::default() }, &study).map_err(|e| e.to_string())?;
        runs.push((seed, out.events));
    }
    for (seed, events) in &runs {
        let (morning, evening, m, _) = spikes(events);
        ensure(morning as f64 > 3.0 * m && evening as f64 > 3.0 * m, || {
            format!("seed {seed}: 09:00 bin {morning}, 19:00 bin {evening}, median {m}")
        })?;
        lines.push(format!("seed {seed} {morning}/{evening} vs median {m}"));
    }
    for seed in [42u64, 7] {
        let sim = SimConfig {
            seed,
            profile: BehaviorProfile {
                notification_responsiveness: 0.0,
                ..BehaviorProfile::default()
            },
            ..SimConfig::default()
        };
        let out = simulate_study(&sim, &study).map_err(|e| e.to_string())?;
        let (_, _, m, max) = spikes(&out.events);
        ensure(max as f64 <= 2.0 * m, || format!("unresponsive seed {seed}: max bin {max}, median {m}"))?;
        lines.push(format!("unresponsive seed {seed} max {max} vs median {m}"));
        if seed == 7 {
            scenarios.push(Scenario {
                name: "unresponsive workers".into(),
                config: out.study_config,
                events: out.events,
                live: out.state,
            });
        }
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- AC7

fn ac7_retention() -> Check {
    let seeds: Vec<u64> = (1..=10).collect();
    let point = evaluate(
        &SimConfig::default(),
        &StudyConfig::default(),
        &BehaviorProfile::default(),
        &seeds,
        &Targets::default(),
    )
    .map_err(|e| e.to_string())?;
    let (all, over) = (point.pct_all_days, point.pct_over_75);
    ensure((all - 36.8).abs() <= 10.0, || format!("mean all-days {all:.1}% outside 36.8 +/- 10"))?;
    ensure((over - 68.4).abs() <= 10.0, || format!("mean over-75% {over:.1}% outside 68.4 +/- 10"))?;
    Ok(format!(
        "10 seeds: all days {all:.1}%, over 75% {over:.1}%, terminal run among missers {:.1}%",
        point.pct_terminal_among_missers
    ))
}

// ---------------------------------------------------------------- AC8

fn fixture_row(i: usize, done: usize, tail_missed: usize) -> MatrixRow {
    let mut days = vec![true; 31];
    for d in days.iter_mut().rev().take(tail_missed) {
        *d = false;
    }
    for d in days.iter_mut().skip(5).take(31 - done - tail_missed) {
        *d = false;
    }
    let scheme = match i {
        0..44 => SchemeId::HI,
        44..98 => SchemeId::HC,
        _ => SchemeId::LC,
    };
    MatrixRow {
        worker_id: format!("W{i:04}"),
        scheme,
        days,
    }
}

fn ac8_fixture() -> Check {
    // 69 full completers, 46 missers ending on a run of 3 or 4 misses, and
    // 72 missers whose final run is shorter.
    let rows = (0..187)
        .map(|i| match i {
            i if i < 69 => fixture_row(i, 31, 0),
            i if i < 115 => fixture_row(i, 10 + i % 18, 3 + i % 2),
            i => fixture_row(i, 25 + i % 5, i % 3),
        })
        .collect();
    let matrix = CompletionMatrix { duration_days: 31, rows };
    let r = retention_summary(&matrix).map_err(|e| e.to_string())?;
    ensure(r.workers == 187 && r.all_days == 69, || format!("{} workers, {} full", r.workers, r.all_days))?;
    ensure(r.missed_any == 118, || format!("missed_any {}", r.missed_any))?;
    ensure(r.terminal_run_workers == 46, || format!("terminal_run_workers {}", r.terminal_run_workers))?;
    Ok(format!(
        "69/187 full ({:.1}%), missed_any 118, terminal runs 46",
        r.pct_all_days
    ))
}

// ---------------------------------------------------------------- AC9

fn ac9_enrollment(scenarios: &mut Vec<Scenario>) -> Check {
    const TZ: Tz = chrono_tz::America::Chicago;
    let mut rig = Rig::new(utc("2021-03-01T12:00:00Z"), FaultConfig::failing(0.1, FaultMode::Mixed), 77)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2021);
    let mut issued: Vec<String> = Vec::new();
    let mut fresh: Vec<String> = Vec::new();
    let mut bad = 0;
    let attempts = 1_000;
    for i in 0..attempts {
        rig.clock.advance(Duration::minutes(1));
        let worker = format!("W{i:04}");
        // Three attempts in every ten use a bad code.
        let roll: f64 = if matches!(i % 10, 3 | 6 | 9) { 0.7 + 0.3 * rng.random::<f64>() } else { 0.0 };
        let answer = if roll < 0.7 {
            let code = rig.issue(&format!("dev-{i:04}"), TZ)?;
            issued.push(code.clone());
            fresh.push(code.clone());
            code
        } else {
            bad += 1;
            if roll < 0.8 {
                // A typo or made-up code.
                (0..6).map(|_| char::from(b'A' + rng.random_range(0..26u8))).collect()
            } else if roll < 0.9 {
                // Someone else's code, usually already used.
                issued[rng.random_range(0..issued.len())].clone()
            } else {
                // A code another worker is entering at the same time.
                fresh.last().cloned().unwrap_or_else(|| issued[0].clone())
            }
        };
        let asg = match rig.crowd.submit_assignment(&rig.hit, &worker, &answer) {
            Ok(a) => a,
            Err(e) => return Err(format!("attempt {i}: {e}")),
        };
        // Some decisions go through the direct path, the rest through review.
        if rng.random_bool(0.3) {
            match rig.study.validate_submission(&worker, &asg, &answer) {
                Ok(_) | Err(ServiceError::Gateway(_)) => {}
                Err(e) => return Err(format!("attempt {i}: {e}")),
            }
        }
        if i % 10 == 9 {
            let now = rig.clock.now();
            rig.study.tick(now).map_err(|e| e.to_string())?;
            fresh.clear();
        }
    }
    // Let the platform recover and drain everything still pending.
    rig.crowd.set_faults(FaultConfig::default());
    for _ in 0..20 {
        rig.clock.advance(Duration::minutes(1));
        let now = rig.clock.now();
        rig.study.tick(now).map_err(|e| e.to_string())?;
    }

    let assignments = rig.crowd.assignments();
    let events = rig.study.store().events();
    let mut decisions: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let mut approvals_by_worker: BTreeMap<&str, usize> = BTreeMap::new();
    let mut approvals_by_device: BTreeMap<&str, usize> = BTreeMap::new();
    for e in events {
        match &e.body {
            EventBody::EnrollmentApproved { assignment_id, device_id, code, .. } => {
                decisions.entry(assignment_id).or_default().push(true);
                *approvals_by_device.entry(device_id).or_default() += 1;
                let worker = e.worker_id.as_deref().ok_or("approval without worker")?;
                *approvals_by_worker.entry(worker).or_default() += 1;
                let vc = rig.study.state().codes.get(code).ok_or_else(|| format!("approval with unknown code {code}"))?;
                ensure(vc.state == CodeState::Consumed && &vc.device_id == device_id, || {
                    format!("approval of {assignment_id} without a consumed code")
                })?;
            }
            EventBody::EnrollmentRejected { assignment_id: Some(a), .. } => {
                decisions.entry(a).or_default().push(false);
            }
            _ => {}
        }
    }
    ensure(assignments.len() == attempts, || format!("{} assignments on the platform", assignments.len()))?;
    for a in &assignments {
        let d = decisions.get(a.id.as_str()).cloned().unwrap_or_default();
        ensure(d.len() == 1, || format!("{}: {} decisions", a.id, d.len()))?;
        let expected = if d[0] { AssignmentStatus::Approved } else { AssignmentStatus::Rejected };
        ensure(a.status == expected, || format!("{}: platform says {:?}, log says {}", a.id, a.status, d[0]))?;
    }
    ensure(approvals_by_worker.values().all(|&n| n == 1), || "a worker was approved twice".into())?;
    ensure(approvals_by_device.values().all(|&n| n == 1), || "a device was bound twice".into())?;
    let approved = approvals_by_worker.len();
    scenarios.push(rig.finish("enrollment under faults"));
    Ok(format!(
        "{attempts} attempts ({bad} wrong or replayed), one decision each, {approved} approvals all with consumed codes, no double associations, 10% platform faults"
    ))
}

// ---------------------------------------------------------------- AC10

fn ac10_replay(scenarios: &[Scenario]) -> Check {
    let kinds = [Report::Retention, Report::Payments, Report::Histogram, Report::Tests, Report::Heatmap];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, s) in scenarios.iter().enumerate() {
        let replayed = replay(&s.events, &s.config).map_err(|e| format!("{}: {e}", s.name))?;
        ensure(replayed == s.live, || format!("{}: replayed state differs", s.name))?;

        let path = tmp.path().join(format!("{i}.ndjson"));
        let file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
        write_events(&s.events, std::io::BufWriter::new(file)).map_err(|e| e.to_string())?;
        let reread = read_log_file(&path).map_err(|e| format!("{}: {e}", s.name))?;
        ensure(reread == s.events, || format!("{}: log does not round-trip", s.name))?;
        for kind in kinds {
            let a = render_report(&s.events, &s.config, kind, TVariant::Welch).map_err(|e| e.to_string());
            let b = render_report(&reread, &s.config, kind, TVariant::Welch).map_err(|e| e.to_string());
            ensure(a == b, || format!("{}: {kind:?} report differs after re-reading", s.name))?;
        }
    }
    let names: Vec<&str> = scenarios.iter().map(|s| s.name.as_str()).collect();
    Ok(format!("{} scenarios ({}) replay to identical state and reports", names.len(), names.join(", ")))
}
