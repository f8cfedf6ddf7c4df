//! Seeded behavioral simulation of a whole study.
//!
//! Simulated workers go through the real service: they install the app,
//! enter their code on the mock crowd platform, react to reminders from the
//! mock push service and submit measurements, all on a virtual clock. The
//! output is the ordinary event log.
//!
//! Every random choice comes from a stream derived from
//! `(seed, worker, day, purpose)`, so one worker's draws never depend on
//! what another worker did, and runs differing in one parameter stay
//! comparable draw for draw.

mod calibrate;
mod payload;
mod profile;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use chrono_tz::Tz;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, VirtualClock};
use crate::domain::{
    local_date, local_instant, local_time_of_day, Cents, ConsentRecord, Demographics,
    DomainError, Hand, LifecycleState, SchemeId, StudyConfig, StudyEvent, WorkerId,
};
use crate::gateway::{FaultConfig, LedgerEntry, MockCrowd, MockPush, PushRecord};
use crate::persistence::EventStore;
use crate::service::{
    Dispatched, EnrollmentRequest, SchemePolicy, ServiceError, Study, CODE_ALPHABET, CODE_LEN,
};
use crate::state::StudyState;

pub use calibrate::{calibrate, evaluate, hazard_curve, CalibrationError, CalibrationPoint, Grid, Targets};
pub use payload::generate_payload;
pub use profile::{worker_day_decision, BehaviorProfile, DayState, Decision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    /// Enrolled workers per scheme.
    pub workers: BTreeMap<SchemeId, usize>,
    /// Timezones and their relative weights.
    pub timezones: Vec<(Tz, f64)>,
    pub profile: BehaviorProfile,
    /// Half-width of the per-worker uniform jitter on the daily completion
    /// probability.
    pub jitter: f64,
    pub start: DateTime<Utc>,
    /// Installs are spread over this many local days from the start.
    pub enrollment_spread_days: u32,
    /// Installs that never enter their code on the platform.
    pub unassociated_installs: usize,
    /// Share of workers whose first code entry is a typo.
    pub wrong_code_rate: f64,
    /// Share of completed days followed by a second same-day submission.
    pub duplicate_rate: f64,
    pub crowd_faults: FaultConfig,
    pub push_faults: FaultConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            workers: BTreeMap::from([(SchemeId::HI, 44), (SchemeId::HC, 54), (SchemeId::LC, 89)]),
            timezones: vec![
                (chrono_tz::America::Los_Angeles, 0.25),
                (chrono_tz::America::Denver, 0.1),
                (chrono_tz::America::Chicago, 0.25),
                (chrono_tz::America::New_York, 0.3),
                (chrono_tz::Europe::London, 0.1),
            ],
            profile: BehaviorProfile::default(),
            jitter: 0.08,
            start: DateTime::parse_from_rfc3339("2021-03-01T00:00:00Z")
                .expect("valid instant")
                .with_timezone(&Utc),
            enrollment_spread_days: 2,
            unassociated_installs: 3,
            wrong_code_rate: 0.05,
            duplicate_rate: 0.05,
            crowd_faults: FaultConfig::default(),
            push_faults: FaultConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        self.profile.validate()?;
        if self.workers.values().any(|&n| n == 0) || self.workers.is_empty() {
            return Err(DomainError::InvalidConfig("every scheme needs at least one worker".into()));
        }
        if self.timezones.is_empty() || self.timezones.iter().any(|(_, w)| !(*w >= 0.0)) {
            return Err(DomainError::InvalidConfig("timezone weights must be non-negative".into()));
        }
        for (name, p) in [
            ("wrong_code_rate", self.wrong_code_rate),
            ("duplicate_rate", self.duplicate_rate),
            ("jitter", self.jitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DomainError::InvalidConfig(format!("{name} = {p} out of range")));
            }
        }
        if self.enrollment_spread_days == 0 {
            return Err(DomainError::InvalidConfig("enrollment_spread_days must be positive".into()));
        }
        Ok(())
    }

    pub fn total_workers(&self) -> usize {
        self.workers.values().sum()
    }
}

/// Purpose tags for random streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Setup = 1,
    DayStart = 2,
    Morning = 3,
    Evening = 4,
    Reengagement = 5,
    Payload = 6,
    Duplicate = 7,
    Schemes = 8,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn substream(seed: u64, worker: usize, day: u32, purpose: Stream) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [worker as u64, u64::from(day), purpose as u64] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Everything a simulation run produced.
pub struct SimOutcome {
    pub study_config: StudyConfig,
    pub events: Vec<StudyEvent>,
    pub state: StudyState,
    /// The mock platform's ledger.
    pub ledger: Vec<LedgerEntry>,
    pub pushes: Vec<PushRecord>,
    pub duplicates_attempted: usize,
    pub duplicates_rejected: usize,
    /// Survey HIT id and the number of workers qualified for it.
    pub survey: Option<(String, usize)>,
}

impl SimOutcome {
    pub fn ledger_total(&self, worker_id: &str) -> Cents {
        self.ledger
            .iter()
            .filter(|e| {
                e.worker_id == worker_id
                    && matches!(e.kind, crate::gateway::LedgerKind::HitPayment | crate::gateway::LedgerKind::Bonus)
            })
            .map(|e| e.amount)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Install(usize),
    EnterCode(usize, u32),
    DayStart(usize, u32),
    Submit(usize, u32),
    Duplicate(usize, u32),
}

struct SimWorker {
    worker_id: WorkerId,
    device_id: String,
    scheme: SchemeId,
    tz: Tz,
    associates: bool,
    typo_first: bool,
    code: Option<String>,
    awaiting_review: bool,
    attempts: u32,
    first_day: Option<NaiveDate>,
    last_completed: u32,
    reminders_today: (u32, u32),
    dropped: bool,
    profile: BehaviorProfile,
}

struct Runner<'a> {
    sim: &'a SimConfig,
    study: Study,
    clock: Arc<VirtualClock>,
    crowd: Arc<MockCrowd>,
    workers: Vec<SimWorker>,
    queue: BinaryHeap<Reverse<(DateTime<Utc>, u64, Action)>>,
    queued: u64,
    hit_id: String,
    duplicates_attempted: usize,
    duplicates_rejected: usize,
}

fn weighted<T: Copy>(items: &[(T, f64)], u: f64) -> T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut target = u * total;
    for &(item, w) in items {
        if target < w {
            return item;
        }
        target -= w;
    }
    items.last().expect("non-empty").0
}

/// A complete, valid on-boarding request with plausible demographics.
pub fn sample_enrollment_request<R: Rng>(rng: &mut R, tz: Tz, at: DateTime<Utc>, required: u32) -> EnrollmentRequest {
    let hands = [Hand::Right, Hand::Right, Hand::Right, Hand::Left, Hand::Ambidextrous];
    EnrollmentRequest {
        device_model: ["iPhone12,1", "iPhone11,8", "iPhone13,2", "iPhone10,4"][rng.random_range(0..4)]
            .to_string(),
        timezone: tz,
        consent: ConsentRecord {
            toggles: vec![true; 5],
            timestamp: at,
        },
        demographics: Demographics {
            country: if tz == chrono_tz::Europe::London { "GB" } else { "US" }.to_string(),
            dominant_hand: hands[rng.random_range(0..hands.len())],
            height_cm: Some(f64::from(rng.random_range(150..195u32))),
            weight_kg: Some(f64::from(rng.random_range(48..110u32))),
            gender: ["female", "male", "nonbinary"][rng.random_range(0..3)].to_string(),
        },
        first_measurement: generate_payload(rng, required),
    }
}

impl<'a> Runner<'a> {
    fn push(&mut self, at: DateTime<Utc>, action: Action) {
        self.queued += 1;
        self.queue.push(Reverse((at, self.queued, action)));
    }

    fn day_instant(&self, w: usize, day: u32, time: NaiveTime) -> DateTime<Utc> {
        let worker = &self.workers[w];
        let first = worker.first_day.expect("enrolled worker");
        local_instant(worker.tz, first + chrono::Days::new(u64::from(day - 1)), time)
    }

    fn participant_state(&self, w: usize) -> Option<LifecycleState> {
        self.study
            .state()
            .participant(&self.workers[w].device_id)
            .map(|p| p.state)
    }

    fn run(&mut self) -> Result<(), ServiceError> {
        let end = self.sim.start
            + Duration::days(i64::from(
                self.study.config().duration_days + self.sim.enrollment_spread_days + 4,
            ));
        loop {
            let action_at = self.queue.peek().map(|Reverse((t, _, _))| *t);
            let due_at = self.study.next_due();
            let next = match (action_at, due_at) {
                (None, None) => break,
                (a, d) => a.into_iter().chain(d).min().expect("one is set"),
            };
            if next > end {
                break;
            }
            self.clock.set(next);
            if due_at.is_some_and(|d| d <= next) {
                let sent = self.study.tick(next)?;
                self.after_tick(&sent);
            }
            if action_at == Some(next) {
                let Reverse((at, _, action)) = self.queue.pop().expect("peeked");
                self.act(at, action)?;
            }
        }
        Ok(())
    }

    fn after_tick(&mut self, sent: &[Dispatched]) {
        let waiting: Vec<usize> = (0..self.workers.len())
            .filter(|&w| self.workers[w].awaiting_review)
            .collect();
        for w in waiting {
            self.sync_enrollment(w);
        }
        for d in sent {
            if let Some(w) = self.workers.iter().position(|x| x.device_id == d.device_id) {
                self.react(w, d);
            }
        }
    }

    /// Follows a worker's code entry through the platform review.
    fn sync_enrollment(&mut self, w: usize) {
        let now = self.clock.now();
        let worker = &self.workers[w];
        let state = self.study.state();
        if let Some(p) = state.participant_by_worker(&worker.worker_id) {
            if p.device_id == worker.device_id {
                let first_day = local_date(p.timezone, p.enrolled_at.expect("approved"));
                let worker = &mut self.workers[w];
                worker.awaiting_review = false;
                worker.first_day = Some(first_day);
                worker.last_completed = 1;
                let day2 = self.day_instant(w, 2, NaiveTime::MIN);
                if self.study.config().duration_days >= 2 {
                    self.push(day2, Action::DayStart(w, 2));
                }
                return;
            }
        }
        let rejected = state
            .decisions
            .values()
            .filter(|d| d.worker_id == worker.worker_id)
            .count() as u32;
        if rejected >= worker.attempts && worker.attempts < 3 {
            // The typo was rejected; enter the right code a little later.
            self.workers[w].awaiting_review = false;
            let attempt = self.workers[w].attempts;
            self.push(now + Duration::minutes(7), Action::EnterCode(w, attempt));
        }
    }

    fn react(&mut self, w: usize, d: &Dispatched) {
        let worker = &self.workers[w];
        if worker.dropped || worker.last_completed >= d.study_day {
            return;
        }
        let (day, count) = worker.reminders_today;
        let count = if day == d.study_day { count + 1 } else { 1 };
        self.workers[w].reminders_today = (d.study_day, count);
        let worker = &self.workers[w];
        let stream = match d.kind {
            crate::domain::NotificationKind::Morning => Stream::Morning,
            crate::domain::NotificationKind::EveningConditional => Stream::Evening,
            crate::domain::NotificationKind::Reengagement => Stream::Reengagement,
        };
        let mut rng = substream(self.sim.seed, w, d.study_day, stream);
        let state = DayState {
            day_index: d.study_day,
            notifications_received_today: count,
            missed_streak: d.study_day - 1 - worker.last_completed.min(d.study_day - 1),
            reminder_at: Some(local_time_of_day(worker.tz, d.at)),
            scheme: worker.scheme,
        };
        if let Decision::CompleteAt(t) = worker_day_decision(&worker.profile, state, &mut rng) {
            let at = self.day_instant(w, d.study_day, t).max(d.at);
            self.push(at, Action::Submit(w, d.study_day));
        }
    }

    fn act(&mut self, now: DateTime<Utc>, action: Action) -> Result<(), ServiceError> {
        let required = self.study.config().required_correct_rounds;
        match action {
            Action::Install(w) => {
                let worker = &self.workers[w];
                let mut rng = substream(self.sim.seed, w, 0, Stream::Payload);
                let request = sample_enrollment_request(&mut rng, worker.tz, now, required);
                let device = worker.device_id.clone();
                let code = self.study.issue_code(&device, request)?;
                self.workers[w].code = Some(code.code);
                if self.workers[w].associates {
                    let mut rng = substream(self.sim.seed, w, 0, Stream::Setup);
                    let delay = Duration::seconds(rng.random_range(120..1200));
                    self.push(now + delay, Action::EnterCode(w, 0));
                }
            }
            Action::EnterCode(w, attempt) => {
                let worker = &self.workers[w];
                let answer = if attempt == 0 && worker.typo_first {
                    let mut rng = substream(self.sim.seed, w, 1, Stream::Setup);
                    (0..CODE_LEN)
                        .map(|_| CODE_ALPHABET[rng.random_range(0..CODE_ALPHABET.len())] as char)
                        .collect()
                } else {
                    worker.code.clone().expect("code issued")
                };
                let worker_id = worker.worker_id.clone();
                match self.crowd.submit_assignment(&self.hit_id, &worker_id, &answer) {
                    Ok(_) => {
                        self.workers[w].attempts = attempt + 1;
                        self.workers[w].awaiting_review = true;
                        let sent = self.study.tick(now)?;
                        self.after_tick(&sent);
                    }
                    Err(_) if attempt < 20 => {
                        self.push(now + Duration::minutes(5), Action::EnterCode(w, attempt));
                    }
                    Err(_) => {}
                }
            }
            Action::DayStart(w, day) => {
                if self.workers[w].dropped
                    || !self.participant_state(w).is_some_and(|s| s.is_live())
                {
                    return Ok(());
                }
                let worker = &self.workers[w];
                let mut rng = substream(self.sim.seed, w, day, Stream::DayStart);
                let state = DayState {
                    day_index: day,
                    notifications_received_today: 0,
                    missed_streak: day - 1 - worker.last_completed,
                    reminder_at: None,
                    scheme: worker.scheme,
                };
                match worker_day_decision(&worker.profile, state, &mut rng) {
                    Decision::DropPermanently => {
                        self.workers[w].dropped = true;
                        return Ok(());
                    }
                    Decision::CompleteAt(t) => {
                        let at = self.day_instant(w, day, t).max(now);
                        self.push(at, Action::Submit(w, day));
                    }
                    Decision::Skip => {}
                }
                if day < self.study.config().duration_days {
                    let next = self.day_instant(w, day + 1, NaiveTime::MIN);
                    self.push(next, Action::DayStart(w, day + 1));
                }
            }
            Action::Submit(w, day) => {
                let worker = &self.workers[w];
                if worker.dropped || worker.last_completed >= day {
                    return Ok(());
                }
                let mut rng = substream(self.sim.seed, w, day, Stream::Payload);
                let payload = generate_payload(&mut rng, required);
                let device = worker.device_id.clone();
                match self.study.submit_measurement(&device, payload, now) {
                    Ok(_) => {
                        self.workers[w].last_completed = day;
                        let mut rng = substream(self.sim.seed, w, day, Stream::Duplicate);
                        let u: f64 = rng.random();
                        let delay = Duration::seconds(rng.random_range(30..1800));
                        let midnight = self.day_instant(w, day + 1, NaiveTime::MIN);
                        let at = (now + delay).min(midnight - Duration::seconds(1)).max(now);
                        if u < self.sim.duplicate_rate {
                            self.push(at, Action::Duplicate(w, day));
                        }
                    }
                    Err(ServiceError::WindowExpired) | Err(ServiceError::DuplicateDay(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Action::Duplicate(w, day) => {
                let mut rng = substream(self.sim.seed, w, day + 1000, Stream::Payload);
                let payload = generate_payload(&mut rng, required);
                let device = self.workers[w].device_id.clone();
                self.duplicates_attempted += 1;
                match self.study.submit_measurement(&device, payload, now) {
                    Err(ServiceError::DuplicateDay(_)) => self.duplicates_rejected += 1,
                    Err(ServiceError::WindowExpired) => self.duplicates_rejected += 1,
                    Ok(_) => {
                        return Err(ServiceError::Persist(crate::persistence::PersistError::Validation(
                            DomainError::Invalid(format!("duplicate for day {day} was accepted")),
                        )))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }
}

/// Runs a full study under `sim` and returns its log.
pub fn simulate_study(sim: &SimConfig, study_config: &StudyConfig) -> Result<SimOutcome, ServiceError> {
    sim.validate()?;
    study_config.validate()?;
    let clock = Arc::new(VirtualClock::new(sim.start));
    let crowd = Arc::new(MockCrowd::new(clock.clone(), sim.crowd_faults, splitmix(sim.seed ^ 0xc0)));
    let push = Arc::new(MockPush::new(clock.clone(), sim.push_faults, splitmix(sim.seed ^ 0x9a)));

    // Scheme labels shuffled once per seed, then fixed per worker index.
    let mut labels: Vec<SchemeId> = sim
        .workers
        .iter()
        .flat_map(|(&s, &n)| std::iter::repeat_n(s, n))
        .collect();
    let mut rng = substream(sim.seed, usize::MAX, 0, Stream::Schemes);
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    let n_assoc = labels.len();
    let mut workers = Vec::new();
    let mut policy = BTreeMap::new();
    for i in 0..n_assoc + sim.unassociated_installs {
        let mut rng = substream(sim.seed, i, 0, Stream::Setup);
        let tz = weighted(&sim.timezones, rng.random());
        let u_jitter: f64 = rng.random();
        let u_typo: f64 = rng.random();
        let scheme = labels.get(i).copied().unwrap_or(SchemeId::LC);
        let worker_id = format!("W{:04}", i + 1);
        policy.insert(worker_id.clone(), scheme);
        let mut profile = sim.profile.clone();
        profile.base_daily_completion =
            (profile.base_daily_completion + sim.jitter * (2.0 * u_jitter - 1.0)).clamp(0.0, 1.0);
        workers.push(SimWorker {
            worker_id,
            device_id: format!("dev-{:04}", i + 1),
            scheme,
            tz,
            associates: i < n_assoc,
            typo_first: u_typo < sim.wrong_code_rate,
            code: None,
            awaiting_review: false,
            attempts: 0,
            first_day: None,
            last_completed: 0,
            reminders_today: (0, 0),
            dropped: false,
            profile,
        });
    }

    let store = EventStore::in_memory(study_config.clone());
    let mut study = Study::new(store, crowd.clone(), push.clone(), clock.clone())
        .with_policy(SchemePolicy::Fixed(policy));
    let hit_id = loop {
        match study.publish_enrollment_hit() {
            Ok(id) | Err(ServiceError::DuplicateHit(id)) => break id,
            Err(ServiceError::Gateway(e)) if e.is_transient() => continue,
            Err(e) => return Err(e),
        }
    };

    let mut runner = Runner {
        sim,
        study,
        clock: clock.clone(),
        crowd: crowd.clone(),
        workers,
        queue: BinaryHeap::new(),
        queued: 0,
        hit_id,
        duplicates_attempted: 0,
        duplicates_rejected: 0,
    };
    let start_date = sim.start.date_naive();
    for w in 0..runner.workers.len() {
        let mut rng = substream(sim.seed, w, 0, Stream::DayStart);
        let offset = rng.random_range(0..sim.enrollment_spread_days);
        let time = sim.profile.diurnal_time(rng.random(), rng.random());
        let tz = runner.workers[w].tz;
        let at = local_instant(tz, start_date + chrono::Days::new(u64::from(offset)), time).max(sim.start);
        runner.push(at, Action::Install(w));
    }
    runner.run()?;

    let mut survey = None;
    for _ in 0..10 {
        if let Ok(s) = runner.study.publish_survey(Cents(100)) {
            survey = Some(s);
            break;
        }
    }
    let store = runner.study.into_store();
    Ok(SimOutcome {
        study_config: study_config.clone(),
        events: store.events().to_vec(),
        state: store.state().clone(),
        ledger: crowd.ledger(),
        pushes: push.sent(),
        duplicates_attempted: runner.duplicates_attempted,
        duplicates_rejected: runner.duplicates_rejected,
        survey,
    })
}
