//! Core entities shared by every other module: configuration, participants,
//! measurements and the study event record.

mod calendar;
mod config;
mod event;
mod measurement;
mod participant;

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calendar::{local_date, local_instant, local_time_of_day, next_local_midnight, study_day};
pub use config::{PaymentScheme, SchemeId, SchemeKind, StudyConfig};
pub use event::{
    CancelReason, EventBody, EventKind, NotificationKind, RejectReason, StudyEvent,
};
pub use measurement::{MeasurementPayload, MeasurementRecord, RoundParams, RoundResult};
pub use participant::{ConsentRecord, Demographics, Hand, LifecycleState, Participant};

/// Integer amount of US cents. All money in the system is carried in this type.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Cents(pub i64);

impl Cents {
    pub const ZERO: Cents = Cents(0);

    pub fn dollars(self) -> String {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        format!("{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.dollars())
    }
}

impl Add for Cents {
    type Output = Cents;
    fn add(self, rhs: Cents) -> Cents {
        Cents(self.0 + rhs.0)
    }
}

impl AddAssign for Cents {
    fn add_assign(&mut self, rhs: Cents) {
        self.0 += rhs.0;
    }
}

impl Sub for Cents {
    type Output = Cents;
    fn sub(self, rhs: Cents) -> Cents {
        Cents(self.0 - rhs.0)
    }
}

impl Sum for Cents {
    fn sum<I: Iterator<Item = Cents>>(iter: I) -> Cents {
        iter.fold(Cents::ZERO, Add::add)
    }
}

pub type WorkerId = String;
pub type DeviceId = String;
pub type AssignmentId = String;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("illegal transition: {event} not permitted in state {state:?}")]
    IllegalTransition {
        state: LifecycleState,
        event: EventKind,
    },
    #[error("timestamp {0} precedes enrollment")]
    BeforeEnrollment(chrono::DateTime<chrono::Utc>),
    #[error("study day {day} is outside the {duration}-day window")]
    OutOfWindow { day: u32, duration: u32 },
    #[error("participant is not enrolled")]
    NotEnrolled,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("event rejected: {0}")]
    Invalid(String),
}
