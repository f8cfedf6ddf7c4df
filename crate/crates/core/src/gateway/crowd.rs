use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{draw_fault, Fault, FaultConfig};
use crate::clock::Clock;
use crate::domain::{AssignmentId, Cents, WorkerId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrowdError {
    #[error("crowd platform unavailable: {0}")]
    Unavailable(String),
    #[error("unknown worker {0} (no approved assignment)")]
    UnknownWorker(WorkerId),
    #[error("unknown assignment {0}")]
    UnknownAssignment(AssignmentId),
    #[error("assignment {id} already {status:?}")]
    AlreadyResolved {
        id: AssignmentId,
        status: AssignmentStatus,
    },
    #[error("unknown HIT {0}")]
    UnknownHit(String),
    #[error("unknown qualification {0}")]
    UnknownQualification(String),
    #[error("worker {0} lacks the qualification for this HIT")]
    NotQualified(WorkerId),
    #[error("worker {0} already has an open or approved assignment on this HIT")]
    DuplicateAssignment(WorkerId),
    #[error("idempotency key {0} reused with different parameters")]
    KeyConflict(String),
}

impl CrowdError {
    /// Transient errors are worth retrying; the rest are final answers.
    pub fn is_transient(&self) -> bool {
        matches!(self, CrowdError::Unavailable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitSpec {
    pub title: String,
    pub description: String,
    pub reward: Cents,
    pub max_assignments: u32,
    /// Requester-side tag used to find HITs belonging to one study.
    pub annotation: String,
    pub qualification: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssignmentStatus {
    Submitted,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: AssignmentId,
    pub hit_id: String,
    pub worker_id: WorkerId,
    /// Free-text answer typed on the HIT page (the verification code).
    pub answer: String,
    pub status: AssignmentStatus,
    pub submitted_at: DateTime<Utc>,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LedgerKind {
    HitPayment,
    Bonus,
    SurveyPayment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub worker_id: WorkerId,
    pub kind: LedgerKind,
    pub amount: Cents,
    pub reason: String,
    pub at: DateTime<Utc>,
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub id: String,
    pub amount: Cents,
    pub idempotency_key: String,
}

/// Operations the study needs from the crowd-work platform.
///
/// Implementations must be safe under concurrent callers and enforce
/// idempotency themselves.
pub trait CrowdGateway: Send + Sync {
    fn create_hit(&self, spec: &HitSpec) -> Result<String, CrowdError>;
    fn find_hits(&self, annotation: &str) -> Result<Vec<String>, CrowdError>;
    fn submitted_assignments(&self, hit_id: &str) -> Result<Vec<Assignment>, CrowdError>;
    fn assignment(&self, assignment_id: &str) -> Result<Assignment, CrowdError>;
    fn approve_assignment(&self, assignment_id: &str) -> Result<(), CrowdError>;
    fn reject_assignment(&self, assignment_id: &str, feedback: &str) -> Result<(), CrowdError>;
    fn send_bonus(
        &self,
        worker_id: &str,
        amount: Cents,
        reason: &str,
        idempotency_key: &str,
    ) -> Result<Receipt, CrowdError>;
    fn create_qualification(&self, name: &str) -> Result<String, CrowdError>;
    fn grant_qualification(&self, qualification_id: &str, worker_id: &str) -> Result<(), CrowdError>;
    fn publish_survey_hit(&self, qualification_id: &str, reward: Cents) -> Result<String, CrowdError>;
}

#[derive(Debug)]
struct Hit {
    spec: HitSpec,
}

#[derive(Debug)]
struct Inner {
    hits: BTreeMap<String, Hit>,
    assignments: BTreeMap<AssignmentId, Assignment>,
    ledger: Vec<LedgerEntry>,
    by_key: BTreeMap<String, usize>,
    qualifications: BTreeMap<String, BTreeSet<WorkerId>>,
    faults: FaultConfig,
    rng: ChaCha8Rng,
    down: bool,
    next_id: u64,
}

impl Inner {
    fn fault(&mut self) -> Result<Fault, CrowdError> {
        if self.down {
            return Err(CrowdError::Unavailable("platform down".into()));
        }
        match draw_fault(&self.faults, &mut self.rng) {
            Fault::Before => Err(CrowdError::Unavailable("injected failure".into())),
            f => Ok(f),
        }
    }

    fn id(&mut self, prefix: &str) -> String {
        self.next_id += 1;
        format!("{prefix}{:06}", self.next_id)
    }

    fn approved_worker(&self, worker_id: &str) -> bool {
        self.assignments
            .values()
            .any(|a| a.worker_id == worker_id && a.status == AssignmentStatus::Approved)
    }

    fn record(&mut self, entry: LedgerEntry) -> usize {
        let idx = self.ledger.len();
        self.by_key.insert(entry.idempotency_key.clone(), idx);
        self.ledger.push(entry);
        idx
    }
}

fn after(fault: Fault) -> Result<(), CrowdError> {
    if fault == Fault::After {
        Err(CrowdError::Unavailable("injected failure after effect".into()))
    } else {
        Ok(())
    }
}

/// In-process crowd platform with a money ledger and fault injection.
pub struct MockCrowd {
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl MockCrowd {
    pub fn new(clock: Arc<dyn Clock>, faults: FaultConfig, seed: u64) -> Self {
        Self {
            clock,
            inner: Mutex::new(Inner {
                hits: BTreeMap::new(),
                assignments: BTreeMap::new(),
                ledger: Vec::new(),
                by_key: BTreeMap::new(),
                qualifications: BTreeMap::new(),
                faults,
                rng: ChaCha8Rng::seed_from_u64(seed),
                down: false,
                next_id: 0,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("mock crowd lock")
    }

    pub fn set_faults(&self, faults: FaultConfig) {
        self.lock().faults = faults;
    }

    /// Simulates a full outage: every call fails without effect.
    pub fn set_down(&self, down: bool) {
        self.lock().down = down;
    }

    /// Worker side: accept the HIT and submit `answer` on its page.
    pub fn submit_assignment(
        &self,
        hit_id: &str,
        worker_id: &str,
        answer: &str,
    ) -> Result<AssignmentId, CrowdError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let hit = inner
            .hits
            .get(hit_id)
            .ok_or_else(|| CrowdError::UnknownHit(hit_id.to_string()))?;
        if let Some(q) = &hit.spec.qualification {
            let granted = inner.qualifications.get(q).is_some_and(|w| w.contains(worker_id));
            if !granted {
                return Err(CrowdError::NotQualified(worker_id.to_string()));
            }
        }
        let open = inner.assignments.values().any(|a| {
            a.hit_id == hit_id && a.worker_id == worker_id && a.status != AssignmentStatus::Rejected
        });
        if open {
            return Err(CrowdError::DuplicateAssignment(worker_id.to_string()));
        }
        let id = inner.id("ASG");
        inner.assignments.insert(
            id.clone(),
            Assignment {
                id: id.clone(),
                hit_id: hit_id.to_string(),
                worker_id: worker_id.to_string(),
                answer: answer.to_string(),
                status: AssignmentStatus::Submitted,
                submitted_at: now,
                feedback: None,
            },
        );
        Ok(id)
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.lock().ledger.clone()
    }

    /// Sum of ledger entries of the given kinds for one worker.
    pub fn worker_total(&self, worker_id: &str, kinds: &[LedgerKind]) -> Cents {
        self.lock()
            .ledger
            .iter()
            .filter(|e| e.worker_id == worker_id && kinds.contains(&e.kind))
            .map(|e| e.amount)
            .sum()
    }

    pub fn assignments(&self) -> Vec<Assignment> {
        self.lock().assignments.values().cloned().collect()
    }

    pub fn hit_spec(&self, hit_id: &str) -> Option<HitSpec> {
        self.lock().hits.get(hit_id).map(|h| h.spec.clone())
    }

    /// Workers allowed to see a HIT. `None` means everyone.
    pub fn eligible_workers(&self, hit_id: &str) -> Option<BTreeSet<WorkerId>> {
        let inner = self.lock();
        let q = inner.hits.get(hit_id)?.spec.qualification.clone()?;
        Some(inner.qualifications.get(&q).cloned().unwrap_or_default())
    }

    /// Writes the ledger as CSV: `worker_id,kind,amount_cents,at,reason`.
    pub fn export_ledger_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_ledger_csv(&self.ledger(), out)
    }
}

/// Writes ledger entries as CSV: `worker_id,kind,amount_cents,at,reason`.
pub fn write_ledger_csv<W: Write>(entries: &[LedgerEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["worker_id", "kind", "amount_cents", "at", "reason"])?;
    for e in entries {
        w.write_record([
            e.worker_id.as_str(),
            match e.kind {
                LedgerKind::HitPayment => "HitPayment",
                LedgerKind::Bonus => "Bonus",
                LedgerKind::SurveyPayment => "SurveyPayment",
            },
            &e.amount.0.to_string(),
            &e.at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            e.reason.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl CrowdGateway for MockCrowd {
    fn create_hit(&self, spec: &HitSpec) -> Result<String, CrowdError> {
        let mut inner = self.lock();
        let fault = inner.fault()?;
        let id = inner.id("HIT");
        inner.hits.insert(id.clone(), Hit { spec: spec.clone() });
        after(fault)?;
        Ok(id)
    }

    fn find_hits(&self, annotation: &str) -> Result<Vec<String>, CrowdError> {
        let mut inner = self.lock();
        inner.fault()?;
        Ok(inner
            .hits
            .iter()
            .filter(|(_, h)| h.spec.annotation == annotation)
            .map(|(id, _)| id.clone())
            .collect())
    }

    fn submitted_assignments(&self, hit_id: &str) -> Result<Vec<Assignment>, CrowdError> {
        let mut inner = self.lock();
        inner.fault()?;
        if !inner.hits.contains_key(hit_id) {
            return Err(CrowdError::UnknownHit(hit_id.to_string()));
        }
        Ok(inner
            .assignments
            .values()
            .filter(|a| a.hit_id == hit_id && a.status == AssignmentStatus::Submitted)
            .cloned()
            .collect())
    }

    fn assignment(&self, assignment_id: &str) -> Result<Assignment, CrowdError> {
        let mut inner = self.lock();
        inner.fault()?;
        inner
            .assignments
            .get(assignment_id)
            .cloned()
            .ok_or_else(|| CrowdError::UnknownAssignment(assignment_id.to_string()))
    }

    fn approve_assignment(&self, assignment_id: &str) -> Result<(), CrowdError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let fault = inner.fault()?;
        let a = inner
            .assignments
            .get_mut(assignment_id)
            .ok_or_else(|| CrowdError::UnknownAssignment(assignment_id.to_string()))?;
        if a.status != AssignmentStatus::Submitted {
            return Err(CrowdError::AlreadyResolved {
                id: assignment_id.to_string(),
                status: a.status,
            });
        }
        a.status = AssignmentStatus::Approved;
        let worker_id = a.worker_id.clone();
        let hit_id = a.hit_id.clone();
        let (reward, kind) = {
            let spec = &inner.hits[&hit_id].spec;
            let kind = if spec.qualification.is_some() {
                LedgerKind::SurveyPayment
            } else {
                LedgerKind::HitPayment
            };
            (spec.reward, kind)
        };
        inner.record(LedgerEntry {
            worker_id,
            kind,
            amount: reward,
            reason: format!("assignment {assignment_id} approved"),
            at: now,
            idempotency_key: format!("approve:{assignment_id}"),
        });
        after(fault)
    }

    fn reject_assignment(&self, assignment_id: &str, feedback: &str) -> Result<(), CrowdError> {
        let mut inner = self.lock();
        let fault = inner.fault()?;
        let a = inner
            .assignments
            .get_mut(assignment_id)
            .ok_or_else(|| CrowdError::UnknownAssignment(assignment_id.to_string()))?;
        if a.status != AssignmentStatus::Submitted {
            return Err(CrowdError::AlreadyResolved {
                id: assignment_id.to_string(),
                status: a.status,
            });
        }
        a.status = AssignmentStatus::Rejected;
        a.feedback = Some(feedback.to_string());
        after(fault)
    }

    fn send_bonus(
        &self,
        worker_id: &str,
        amount: Cents,
        reason: &str,
        idempotency_key: &str,
    ) -> Result<Receipt, CrowdError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let fault = inner.fault()?;
        if let Some(&idx) = inner.by_key.get(idempotency_key) {
            let e = &inner.ledger[idx];
            if e.worker_id != worker_id || e.amount != amount || e.kind != LedgerKind::Bonus {
                return Err(CrowdError::KeyConflict(idempotency_key.to_string()));
            }
            return Ok(Receipt {
                id: format!("BON{idx:06}"),
                amount,
                idempotency_key: idempotency_key.to_string(),
            });
        }
        if !inner.approved_worker(worker_id) {
            return Err(CrowdError::UnknownWorker(worker_id.to_string()));
        }
        if amount.0 <= 0 {
            return Err(CrowdError::KeyConflict(format!(
                "{idempotency_key}: non-positive amount"
            )));
        }
        let idx = inner.record(LedgerEntry {
            worker_id: worker_id.to_string(),
            kind: LedgerKind::Bonus,
            amount,
            reason: reason.to_string(),
            at: now,
            idempotency_key: idempotency_key.to_string(),
        });
        after(fault)?;
        Ok(Receipt {
            id: format!("BON{idx:06}"),
            amount,
            idempotency_key: idempotency_key.to_string(),
        })
    }

    fn create_qualification(&self, name: &str) -> Result<String, CrowdError> {
        let mut inner = self.lock();
        inner.fault()?;
        let id = format!("QUAL-{name}");
        inner.qualifications.entry(id.clone()).or_default();
        Ok(id)
    }

    fn grant_qualification(&self, qualification_id: &str, worker_id: &str) -> Result<(), CrowdError> {
        let mut inner = self.lock();
        inner.fault()?;
        inner
            .qualifications
            .get_mut(qualification_id)
            .ok_or_else(|| CrowdError::UnknownQualification(qualification_id.to_string()))?
            .insert(worker_id.to_string());
        Ok(())
    }

    fn publish_survey_hit(&self, qualification_id: &str, reward: Cents) -> Result<String, CrowdError> {
        let mut inner = self.lock();
        let fault = inner.fault()?;
        if !inner.qualifications.contains_key(qualification_id) {
            return Err(CrowdError::UnknownQualification(qualification_id.to_string()));
        }
        let id = inner.id("HIT");
        inner.hits.insert(
            id.clone(),
            Hit {
                spec: HitSpec {
                    title: "Follow-up survey for daily study participants".into(),
                    description: "Short questionnaire about reminders and payments.".into(),
                    reward,
                    max_assignments: u32::MAX,
                    annotation: format!("survey:{qualification_id}"),
                    qualification: Some(qualification_id.to_string()),
                },
            },
        );
        after(fault)?;
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::gateway::FaultMode;

    fn mock() -> MockCrowd {
        let clock = Arc::new(VirtualClock::new("2021-03-01T00:00:00Z".parse().unwrap()));
        MockCrowd::new(clock, FaultConfig::default(), 1)
    }

    fn enrollment_hit(m: &MockCrowd) -> String {
        m.create_hit(&HitSpec {
            title: "iOS study".into(),
            description: "iPhone only".into(),
            reward: Cents(100),
            max_assignments: 300,
            annotation: "study".into(),
            qualification: None,
        })
        .unwrap()
    }

    fn approved(m: &MockCrowd, worker: &str) {
        let hit = m.find_hits("study").unwrap().pop().unwrap_or_else(|| enrollment_hit(m));
        let a = m.submit_assignment(&hit, worker, "CODE").unwrap();
        m.approve_assignment(&a).unwrap();
    }

    #[test]
    fn bonus_is_idempotent() {
        let m = mock();
        approved(&m, "w1");
        let r1 = m.send_bonus("w1", Cents(88), "day 5", "A").unwrap();
        let r2 = m.send_bonus("w1", Cents(88), "day 5", "A").unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m.worker_total("w1", &[LedgerKind::Bonus]), Cents(88));
        assert_eq!(
            m.send_bonus("w1", Cents(90), "day 5", "A"),
            Err(CrowdError::KeyConflict("A".into()))
        );
    }

    #[test]
    fn bonus_needs_an_approved_assignment() {
        let m = mock();
        let hit = enrollment_hit(&m);
        m.submit_assignment(&hit, "w1", "CODE").unwrap();
        assert_eq!(
            m.send_bonus("w1", Cents(40), "day 2", "B"),
            Err(CrowdError::UnknownWorker("w1".into()))
        );
    }

    #[test]
    fn bonus_adds_to_total() {
        let m = mock();
        approved(&m, "w1");
        let before = m.worker_total("w1", &[LedgerKind::HitPayment, LedgerKind::Bonus]);
        m.send_bonus("w1", Cents(40), "day 2", "B").unwrap();
        let after = m.worker_total("w1", &[LedgerKind::HitPayment, LedgerKind::Bonus]);
        assert_eq!(after - before, Cents(40));
        assert_eq!(before, Cents(100));
    }

    #[test]
    fn approve_and_reject_are_terminal() {
        let m = mock();
        let hit = enrollment_hit(&m);
        let a = m.submit_assignment(&hit, "w1", "X").unwrap();
        m.approve_assignment(&a).unwrap();
        assert_eq!(m.ledger().len(), 1);
        assert_eq!(m.ledger()[0].kind, LedgerKind::HitPayment);
        assert!(matches!(
            m.approve_assignment(&a),
            Err(CrowdError::AlreadyResolved { status: AssignmentStatus::Approved, .. })
        ));

        let b = m.submit_assignment(&hit, "w2", "Y").unwrap();
        m.reject_assignment(&b, "wrong code").unwrap();
        assert_eq!(m.worker_total("w2", &[LedgerKind::HitPayment]), Cents(0));
        assert_eq!(m.assignment(&b).unwrap().feedback.as_deref(), Some("wrong code"));
    }

    #[test]
    fn survey_hit_is_restricted() {
        let m = mock();
        assert!(matches!(
            m.publish_survey_hit("QUAL-missing", Cents(100)),
            Err(CrowdError::UnknownQualification(_))
        ));
        let q = m.create_qualification("participants").unwrap();
        for i in 0..187 {
            m.grant_qualification(&q, &format!("w{i}")).unwrap();
        }
        let hit = m.publish_survey_hit(&q, Cents(100)).unwrap();
        assert_eq!(m.eligible_workers(&hit).unwrap().len(), 187);
        assert!(matches!(
            m.submit_assignment(&hit, "outsider", ""),
            Err(CrowdError::NotQualified(_))
        ));
        let a = m.submit_assignment(&hit, "w3", "answers").unwrap();
        m.approve_assignment(&a).unwrap();
        assert_eq!(m.worker_total("w3", &[LedgerKind::SurveyPayment]), Cents(100));
    }

    #[test]
    fn after_effect_faults_keep_exactly_one_entry() {
        let m = mock();
        approved(&m, "w1");
        m.set_faults(FaultConfig::failing(0.5, FaultMode::Mixed));
        let mut ok = 0;
        for _ in 0..50 {
            if m.send_bonus("w1", Cents(113), "day 3", "K").is_ok() {
                ok += 1;
            }
        }
        assert!(ok > 0);
        assert_eq!(m.worker_total("w1", &[LedgerKind::Bonus]), Cents(113));
    }

    #[test]
    fn ledger_csv_header() {
        let m = mock();
        approved(&m, "w1");
        let mut buf = Vec::new();
        m.export_ledger_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("worker_id,kind,amount_cents,at,reason\n"));
        assert!(text.contains("w1,HitPayment,100,2021-03-01T00:00:00Z"));
    }
}
