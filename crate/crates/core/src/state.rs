//! State materialized from the event log: participants, verification codes,
//! assignment decisions, measurement records, the ledger mirror and the
//! notification queue.
//!
//! [`StudyState::apply`] is the only mutator. It validates an event in full
//! before touching anything, so a rejected event leaves the state unchanged.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    AssignmentId, CancelReason, Cents, DeviceId, DomainError, EventBody, LifecycleState,
    MeasurementPayload, MeasurementRecord, NotificationKind, Participant, RejectReason,
    StudyConfig, StudyEvent, WorkerId,
};
use crate::gateway::{LedgerEntry, LedgerKind};
use crate::payment::PaymentEngine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeState {
    Unused,
    Consumed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationCode {
    pub code: String,
    pub device_id: DeviceId,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub state: CodeState,
    pub first_measurement: MeasurementPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Approved,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentDecision {
    pub assignment_id: AssignmentId,
    pub worker_id: WorkerId,
    pub outcome: Outcome,
    pub device_id: Option<DeviceId>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationState {
    Pending,
    Sent,
    Cancelled,
    Suppressed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledNotification {
    pub id: u64,
    pub device_id: DeviceId,
    pub worker_id: WorkerId,
    pub kind: NotificationKind,
    pub fire_at: DateTime<Utc>,
    pub study_day: u32,
    pub state: NotificationState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StudyState {
    pub last_seq: u64,
    pub last_at: Option<DateTime<Utc>>,
    pub participants: BTreeMap<DeviceId, Participant>,
    pub workers: BTreeMap<WorkerId, DeviceId>,
    pub codes: BTreeMap<String, VerificationCode>,
    pub decisions: BTreeMap<AssignmentId, AssignmentDecision>,
    pub measurements: BTreeMap<DeviceId, BTreeMap<u32, MeasurementRecord>>,
    /// Payments the platform should hold, as derived from the log.
    pub ledger: Vec<LedgerEntry>,
    pub paid_keys: BTreeSet<String>,
    pub notifications: BTreeMap<u64, ScheduledNotification>,
}

fn invalid(msg: impl Into<String>) -> DomainError {
    DomainError::Invalid(msg.into())
}

/// Everything an event changes, computed before anything is mutated.
#[derive(Default)]
struct Change {
    participant: Option<Participant>,
    record: Option<MeasurementRecord>,
    code: Option<VerificationCode>,
    worker_link: Option<(WorkerId, DeviceId)>,
    decision: Option<AssignmentDecision>,
    paid_key: Option<String>,
    ledger: Option<LedgerEntry>,
    notification: Option<ScheduledNotification>,
}

pub fn bonus_key(worker_id: &str, study_day: u32) -> String {
    format!("{worker_id}:{study_day}")
}

impl StudyState {
    pub fn participant(&self, device_id: &str) -> Option<&Participant> {
        self.participants.get(device_id)
    }

    pub fn participant_by_worker(&self, worker_id: &str) -> Option<&Participant> {
        self.workers.get(worker_id).and_then(|d| self.participants.get(d))
    }

    pub fn records(&self, device_id: &str) -> impl Iterator<Item = &MeasurementRecord> {
        self.measurements.get(device_id).into_iter().flat_map(|m| m.values())
    }

    pub fn has_record(&self, device_id: &str, study_day: u32) -> bool {
        self.measurements
            .get(device_id)
            .is_some_and(|m| m.contains_key(&study_day))
    }

    pub fn next_notification_id(&self) -> u64 {
        self.notifications.keys().next_back().map_or(1, |id| id + 1)
    }

    pub fn pending_notifications(&self) -> impl Iterator<Item = &ScheduledNotification> {
        self.notifications
            .values()
            .filter(|n| n.state == NotificationState::Pending)
    }

    /// Position of a day's measurement among the worker's bonus-earning ones.
    pub fn bonus_index(&self, device_id: &str, study_day: u32) -> Option<u32> {
        let days = self.measurements.get(device_id)?;
        if study_day < 2 || !days.contains_key(&study_day) {
            return None;
        }
        Some(days.range(2..=study_day).count() as u32)
    }

    /// Bonus-earning measurements whose payment the platform has not confirmed,
    /// as `(device_id, study_day, bonus_index)`.
    pub fn unpaid_bonuses(&self) -> Vec<(DeviceId, u32, u32)> {
        let mut out = Vec::new();
        for (device, days) in &self.measurements {
            for (i, (day, rec)) in days.range(2..).enumerate() {
                if rec.bonus_paid == Cents::ZERO {
                    out.push((device.clone(), *day, i as u32 + 1));
                }
            }
        }
        out
    }

    /// Validates `event` against the current state and applies it. On error
    /// the state is unchanged.
    pub fn apply(&mut self, event: &StudyEvent, config: &StudyConfig) -> Result<(), DomainError> {
        let change = self.prepare(event, config)?;
        self.commit(event, change);
        Ok(())
    }

    /// Checks that `event` could be applied, without applying it.
    pub fn check(&self, event: &StudyEvent, config: &StudyConfig) -> Result<(), DomainError> {
        self.prepare(event, config).map(|_| ())
    }

    fn prepare(&self, event: &StudyEvent, config: &StudyConfig) -> Result<Change, DomainError> {
        if event.seq != self.last_seq + 1 {
            return Err(invalid(format!(
                "sequence {} does not follow {}",
                event.seq, self.last_seq
            )));
        }
        if self.last_at.is_some_and(|t| event.at < t) {
            return Err(invalid("event timestamp moves backwards"));
        }
        let mut change = Change::default();
        match &event.body {
            EventBody::CodeIssued {
                device_id,
                code,
                first_measurement,
                ..
            } => {
                if self.participants.contains_key(device_id) {
                    return Err(invalid(format!("device {device_id} already on-boarded")));
                }
                if self.codes.contains_key(code) {
                    return Err(invalid(format!("code {code} already issued")));
                }
                change.participant = Some(Participant::from_code_issued(event)?);
                change.code = Some(VerificationCode {
                    code: code.clone(),
                    device_id: device_id.clone(),
                    issued_at: event.at,
                    expires_at: event.at + Duration::hours(i64::from(config.code_ttl_hours)),
                    state: CodeState::Unused,
                    first_measurement: first_measurement.clone(),
                });
            }
            EventBody::EnrollmentApproved {
                device_id,
                assignment_id,
                code,
                scheme,
            } => {
                let worker = event
                    .worker_id
                    .as_ref()
                    .ok_or_else(|| invalid("approval without worker"))?;
                if self.decisions.contains_key(assignment_id) {
                    return Err(invalid(format!("assignment {assignment_id} already decided")));
                }
                if self.workers.contains_key(worker) {
                    return Err(invalid(format!("worker {worker} already associated")));
                }
                if config.scheme(*scheme).is_none() {
                    return Err(invalid(format!("scheme {scheme} not configured")));
                }
                let vc = self.codes.get(code).ok_or_else(|| invalid("unknown code"))?;
                if vc.state != CodeState::Unused || vc.device_id != *device_id {
                    return Err(invalid(format!("code {code} not usable for {device_id}")));
                }
                if event.at >= vc.expires_at {
                    return Err(invalid(format!("code {code} expired")));
                }
                change.participant = Some(self.transition(device_id, event, config)?);
                change.code = Some(VerificationCode {
                    state: CodeState::Consumed,
                    ..vc.clone()
                });
                change.worker_link = Some((worker.clone(), device_id.clone()));
                change.decision = Some(AssignmentDecision {
                    assignment_id: assignment_id.clone(),
                    worker_id: worker.clone(),
                    outcome: Outcome::Approved,
                    device_id: Some(device_id.clone()),
                    at: event.at,
                });
                change.ledger = Some(LedgerEntry {
                    worker_id: worker.clone(),
                    kind: LedgerKind::HitPayment,
                    amount: config.enrollment_pay,
                    reason: format!("assignment {assignment_id} approved"),
                    at: event.at,
                    idempotency_key: format!("approve:{assignment_id}"),
                });
            }
            EventBody::EnrollmentRejected {
                assignment_id,
                device_id,
                reason,
            } => {
                if assignment_id.is_none() && device_id.is_none() {
                    return Err(invalid("rejection names neither assignment nor device"));
                }
                if let Some(a) = assignment_id {
                    if self.decisions.contains_key(a) {
                        return Err(invalid(format!("assignment {a} already decided")));
                    }
                    let worker = event
                        .worker_id
                        .clone()
                        .ok_or_else(|| invalid("assignment rejection without worker"))?;
                    change.decision = Some(AssignmentDecision {
                        assignment_id: a.clone(),
                        worker_id: worker,
                        outcome: Outcome::Rejected(*reason),
                        device_id: device_id.clone(),
                        at: event.at,
                    });
                }
                if let Some(d) = device_id {
                    change.participant = Some(self.transition(d, event, config)?);
                    change.code = self
                        .codes
                        .values()
                        .find(|c| c.device_id == *d && c.state == CodeState::Unused)
                        .map(|c| VerificationCode {
                            state: CodeState::Expired,
                            ..c.clone()
                        });
                }
            }
            EventBody::MeasurementSubmitted {
                device_id,
                study_day,
                submitted_at,
                local_time,
                scroll_rounds,
                swipe_rounds,
                duration_ms,
            } => {
                let worker = self.expect_worker(device_id, event)?;
                change.participant = Some(self.transition(device_id, event, config)?);
                change.record = Some(MeasurementRecord {
                    worker_id: worker,
                    study_day: *study_day,
                    submitted_at: *submitted_at,
                    local_time: *local_time,
                    scroll_rounds: scroll_rounds.clone(),
                    swipe_rounds: swipe_rounds.clone(),
                    bonus_paid: Cents::ZERO,
                    duration_ms: *duration_ms,
                });
            }
            EventBody::BonusPaid {
                device_id,
                study_day,
                bonus_index,
                amount,
                idempotency_key,
                ..
            } => {
                let worker = self.expect_worker(device_id, event)?;
                if *idempotency_key != bonus_key(&worker, *study_day) {
                    return Err(invalid(format!("unexpected idempotency key {idempotency_key}")));
                }
                if self.paid_keys.contains(idempotency_key) {
                    return Err(invalid(format!("bonus {idempotency_key} already paid")));
                }
                if self.bonus_index(device_id, *study_day) != Some(*bonus_index) {
                    return Err(invalid(format!(
                        "no bonus-earning measurement {bonus_index} on day {study_day}"
                    )));
                }
                let scheme_id = self.participants[device_id]
                    .scheme_id
                    .ok_or_else(|| invalid("participant without scheme"))?;
                let scheme = config
                    .scheme(scheme_id)
                    .ok_or_else(|| invalid(format!("scheme {scheme_id} not configured")))?;
                let due = PaymentEngine::for_config(config)
                    .bonus_amount(scheme, *bonus_index)
                    .map_err(|e| invalid(e.to_string()))?;
                if due != *amount {
                    return Err(invalid(format!("bonus {amount} differs from due {due}")));
                }
                change.participant = Some(self.transition(device_id, event, config)?);
                change.record = Some(MeasurementRecord {
                    bonus_paid: *amount,
                    ..self.measurements[device_id][study_day].clone()
                });
                change.paid_key = Some(idempotency_key.clone());
                change.ledger = Some(LedgerEntry {
                    worker_id: worker,
                    kind: LedgerKind::Bonus,
                    amount: *amount,
                    reason: format!("day {study_day}"),
                    at: event.at,
                    idempotency_key: idempotency_key.clone(),
                });
            }
            EventBody::NotificationScheduled {
                id,
                device_id,
                notification,
                fire_at,
                study_day,
            } => {
                let worker = self.expect_worker(device_id, event)?;
                if *id != self.next_notification_id() {
                    return Err(invalid(format!("notification id {id} out of order")));
                }
                if *study_day < 1 || *study_day > config.duration_days {
                    return Err(DomainError::OutOfWindow {
                        day: *study_day,
                        duration: config.duration_days,
                    });
                }
                change.participant = Some(self.transition(device_id, event, config)?);
                change.notification = Some(ScheduledNotification {
                    id: *id,
                    device_id: device_id.clone(),
                    worker_id: worker,
                    kind: *notification,
                    fire_at: *fire_at,
                    study_day: *study_day,
                    state: NotificationState::Pending,
                });
            }
            EventBody::NotificationSent { id, device_id } => {
                let n = self.pending_for(*id, device_id)?;
                change.participant = Some(self.transition(device_id, event, config)?);
                change.notification = Some(ScheduledNotification {
                    state: NotificationState::Sent,
                    ..n.clone()
                });
            }
            EventBody::NotificationCancelled {
                id,
                device_id,
                reason,
            } => {
                let n = self.pending_for(*id, device_id)?;
                change.participant = Some(self.transition(device_id, event, config)?);
                change.notification = Some(ScheduledNotification {
                    state: match reason {
                        CancelReason::Cancelled => NotificationState::Cancelled,
                        CancelReason::Suppressed => NotificationState::Suppressed,
                        CancelReason::DeliveryFailed => NotificationState::Failed,
                    },
                    ..n.clone()
                });
            }
            EventBody::StudyEnded { device_id } => {
                change.participant = Some(self.transition(device_id, event, config)?);
            }
        }
        Ok(change)
    }

    fn commit(&mut self, event: &StudyEvent, change: Change) {
        if let Some(p) = change.participant {
            if let Some(record) = change.record {
                self.measurements
                    .entry(p.device_id.clone())
                    .or_default()
                    .insert(record.study_day, record);
            }
            self.participants.insert(p.device_id.clone(), p);
        }
        if let Some(code) = change.code {
            self.codes.insert(code.code.clone(), code);
        }
        if let Some((worker, device)) = change.worker_link {
            self.workers.insert(worker, device);
        }
        if let Some(d) = change.decision {
            self.decisions.insert(d.assignment_id.clone(), d);
        }
        if let Some(key) = change.paid_key {
            self.paid_keys.insert(key);
        }
        if let Some(entry) = change.ledger {
            self.ledger.push(entry);
        }
        if let Some(n) = change.notification {
            self.notifications.insert(n.id, n);
        }
        self.last_seq = event.seq;
        self.last_at = Some(event.at);
    }

    fn transition(
        &self,
        device_id: &str,
        event: &StudyEvent,
        config: &StudyConfig,
    ) -> Result<Participant, DomainError> {
        self.participants
            .get(device_id)
            .ok_or_else(|| invalid(format!("unknown device {device_id}")))?
            .transition(event, config)
    }

    fn expect_worker(&self, device_id: &str, event: &StudyEvent) -> Result<WorkerId, DomainError> {
        let p = self
            .participants
            .get(device_id)
            .ok_or_else(|| invalid(format!("unknown device {device_id}")))?;
        match (&p.worker_id, &event.worker_id) {
            (Some(w), Some(e)) if w == e => Ok(w.clone()),
            (None, _) => Err(DomainError::NotEnrolled),
            _ => Err(invalid("event worker does not match device association")),
        }
    }

    fn pending_for(&self, id: u64, device_id: &str) -> Result<&ScheduledNotification, DomainError> {
        match self.notifications.get(&id) {
            Some(n) if n.device_id == device_id && n.state == NotificationState::Pending => Ok(n),
            Some(_) => Err(invalid(format!("notification {id} is not pending for {device_id}"))),
            None => Err(invalid(format!("unknown notification {id}"))),
        }
    }

    /// Participants whose study window is still open.
    pub fn live_participants(&self) -> impl Iterator<Item = &Participant> {
        self.participants.values().filter(|p| p.state.is_live())
    }

    pub fn count_in(&self, state: LifecycleState) -> usize {
        self.participants.values().filter(|p| p.state == state).count()
    }
}
