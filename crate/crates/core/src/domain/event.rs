use std::fmt;

use chrono::{DateTime, NaiveTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use super::{
    AssignmentId, Cents, ConsentRecord, Demographics, DeviceId, MeasurementPayload, RoundResult,
    SchemeId, WorkerId,
};

/// One immutable record of the study log.
///
/// Serialized as a flat JSON object with the fields `seq`, `at`, `kind`,
/// `worker_id` and `payload`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyEvent {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
    /// Absent for events that precede the worker-device association.
    pub worker_id: Option<WorkerId>,
}

impl StudyEvent {
    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    CodeIssued,
    EnrollmentApproved,
    EnrollmentRejected,
    MeasurementSubmitted,
    BonusPaid,
    NotificationScheduled,
    NotificationSent,
    NotificationCancelled,
    StudyEnded,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    CodeIssued {
        device_id: DeviceId,
        code: String,
        device_model: String,
        timezone: Tz,
        demographics: Demographics,
        consent: ConsentRecord,
        first_measurement: MeasurementPayload,
    },
    EnrollmentApproved {
        device_id: DeviceId,
        assignment_id: AssignmentId,
        code: String,
        scheme: SchemeId,
    },
    /// Either a worker's assignment was rejected (wrong, reused or expired
    /// code) or an unused code timed out for a device.
    EnrollmentRejected {
        assignment_id: Option<AssignmentId>,
        device_id: Option<DeviceId>,
        reason: RejectReason,
    },
    MeasurementSubmitted {
        device_id: DeviceId,
        study_day: u32,
        submitted_at: DateTime<Utc>,
        local_time: NaiveTime,
        scroll_rounds: Vec<RoundResult>,
        swipe_rounds: Vec<RoundResult>,
        duration_ms: u64,
    },
    BonusPaid {
        device_id: DeviceId,
        study_day: u32,
        bonus_index: u32,
        amount: Cents,
        idempotency_key: String,
        receipt: String,
    },
    NotificationScheduled {
        id: u64,
        device_id: DeviceId,
        notification: NotificationKind,
        fire_at: DateTime<Utc>,
        study_day: u32,
    },
    NotificationSent {
        id: u64,
        device_id: DeviceId,
    },
    NotificationCancelled {
        id: u64,
        device_id: DeviceId,
        reason: CancelReason,
    },
    StudyEnded {
        device_id: DeviceId,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::CodeIssued { .. } => EventKind::CodeIssued,
            EventBody::EnrollmentApproved { .. } => EventKind::EnrollmentApproved,
            EventBody::EnrollmentRejected { .. } => EventKind::EnrollmentRejected,
            EventBody::MeasurementSubmitted { .. } => EventKind::MeasurementSubmitted,
            EventBody::BonusPaid { .. } => EventKind::BonusPaid,
            EventBody::NotificationScheduled { .. } => EventKind::NotificationScheduled,
            EventBody::NotificationSent { .. } => EventKind::NotificationSent,
            EventBody::NotificationCancelled { .. } => EventKind::NotificationCancelled,
            EventBody::StudyEnded { .. } => EventKind::StudyEnded,
        }
    }

    /// The device this event concerns, when it concerns one.
    pub fn device_id(&self) -> Option<&str> {
        match self {
            EventBody::CodeIssued { device_id, .. }
            | EventBody::EnrollmentApproved { device_id, .. }
            | EventBody::MeasurementSubmitted { device_id, .. }
            | EventBody::BonusPaid { device_id, .. }
            | EventBody::NotificationScheduled { device_id, .. }
            | EventBody::NotificationSent { device_id, .. }
            | EventBody::NotificationCancelled { device_id, .. }
            | EventBody::StudyEnded { device_id } => Some(device_id),
            EventBody::EnrollmentRejected { device_id, .. } => device_id.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NotificationKind {
    Morning,
    EveningConditional,
    Reengagement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CancelReason {
    /// Withdrawn before firing (early submission, completion, window end).
    Cancelled,
    /// Evaluated at fire time and skipped because the day's measurement exists.
    Suppressed,
    /// Push delivery kept failing until the attempt budget ran out.
    DeliveryFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownCode,
    CodeConsumed,
    CodeExpired,
    WorkerAlreadyAssociated,
    DeviceAlreadyAssociated,
}
