use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use super::{
    DeviceId, DomainError, EventBody, SchemeId, StudyConfig, StudyEvent, WorkerId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
    Ambidextrous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub country: String,
    pub dominant_hand: Hand,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
    pub gender: String,
}

impl Eq for Demographics {}

impl Demographics {
    pub fn validate(&self) -> Result<(), DomainError> {
        for (name, v) in [("height", self.height_cm), ("weight", self.weight_kg)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(DomainError::Invalid(format!("{name} must be positive")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub toggles: Vec<bool>,
    pub timestamp: DateTime<Utc>,
}

impl ConsentRecord {
    pub fn complete(&self) -> bool {
        !self.toggles.is_empty() && self.toggles.iter().all(|t| *t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleState {
    CodeIssued,
    Enrolled,
    Active,
    Completed,
    Expired,
    Rejected,
}

impl LifecycleState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            LifecycleState::Completed | LifecycleState::Expired | LifecycleState::Rejected
        )
    }

    /// Enrolled or Active: still inside the study window.
    pub fn is_live(self) -> bool {
        matches!(self, LifecycleState::Enrolled | LifecycleState::Active)
    }
}

/// A device that went through on-boarding, and once approved, the worker
/// bound to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub device_id: DeviceId,
    pub device_model: String,
    pub worker_id: Option<WorkerId>,
    pub timezone: Tz,
    pub scheme_id: Option<SchemeId>,
    pub state: LifecycleState,
    pub code_issued_at: DateTime<Utc>,
    pub enrolled_at: Option<DateTime<Utc>>,
    pub demographics: Demographics,
    pub consent: ConsentRecord,
    /// Bonus-earning measurements accepted so far (excludes the enrollment one).
    pub bonus_count: u32,
    /// Bonuses confirmed by the crowd platform.
    pub bonuses_paid: u32,
    pub last_study_day: u32,
}

impl Participant {
    /// Builds the initial record from a `CodeIssued` event.
    pub fn from_code_issued(event: &StudyEvent) -> Result<Self, DomainError> {
        match &event.body {
            EventBody::CodeIssued {
                device_id,
                device_model,
                timezone,
                demographics,
                consent,
                ..
            } => Ok(Participant {
                device_id: device_id.clone(),
                device_model: device_model.clone(),
                worker_id: None,
                timezone: *timezone,
                scheme_id: None,
                state: LifecycleState::CodeIssued,
                code_issued_at: event.at,
                enrolled_at: None,
                demographics: demographics.clone(),
                consent: consent.clone(),
                bonus_count: 0,
                bonuses_paid: 0,
                last_study_day: 0,
            }),
            _ => Err(DomainError::Invalid(format!(
                "{} cannot create a participant",
                event.kind()
            ))),
        }
    }

    /// Total measurements including the enrollment one.
    pub fn measurements(&self) -> u32 {
        if self.last_study_day == 0 {
            0
        } else {
            self.bonus_count + 1
        }
    }

    /// Applies `event` and returns the updated participant. `self` is untouched.
    pub fn transition(&self, event: &StudyEvent, config: &StudyConfig) -> Result<Self, DomainError> {
        use LifecycleState::*;
        let illegal = || DomainError::IllegalTransition {
            state: self.state,
            event: event.kind(),
        };
        let mut next = self.clone();
        match &event.body {
            EventBody::CodeIssued { .. } => return Err(illegal()),
            EventBody::EnrollmentApproved { scheme, .. } => {
                if self.state != CodeIssued {
                    return Err(illegal());
                }
                let worker = event
                    .worker_id
                    .clone()
                    .ok_or_else(|| DomainError::Invalid("approval without worker_id".into()))?;
                next.state = Enrolled;
                next.worker_id = Some(worker);
                next.scheme_id = Some(*scheme);
                next.enrolled_at = Some(event.at);
            }
            EventBody::EnrollmentRejected { .. } => {
                if self.state != CodeIssued {
                    return Err(illegal());
                }
                next.state = Rejected;
            }
            EventBody::MeasurementSubmitted { study_day, .. } => {
                let day = *study_day;
                if day == 0 || day > config.duration_days {
                    return Err(DomainError::OutOfWindow {
                        day,
                        duration: config.duration_days,
                    });
                }
                if day <= self.last_study_day {
                    return Err(DomainError::Invalid(format!(
                        "study day {day} not after last recorded day {}",
                        self.last_study_day
                    )));
                }
                if day == 1 {
                    if self.state != Enrolled {
                        return Err(illegal());
                    }
                } else {
                    if !self.state.is_live() || self.bonus_count >= config.max_bonuses() {
                        return Err(illegal());
                    }
                    next.bonus_count += 1;
                    next.state = if next.bonus_count == config.max_bonuses() {
                        Completed
                    } else {
                        Active
                    };
                }
                next.last_study_day = day;
            }
            EventBody::BonusPaid { bonus_index, .. } => {
                if !matches!(self.state, Active | Completed | Expired) {
                    return Err(illegal());
                }
                if *bonus_index == 0 || *bonus_index > self.bonus_count {
                    return Err(DomainError::Invalid(format!(
                        "bonus index {bonus_index} not earned (bonus_count {})",
                        self.bonus_count
                    )));
                }
                next.bonuses_paid += 1;
            }
            EventBody::NotificationScheduled { .. } | EventBody::NotificationSent { .. } => {
                if !self.state.is_live() {
                    return Err(illegal());
                }
            }
            EventBody::NotificationCancelled { .. } => {
                if matches!(self.state, CodeIssued | Rejected) {
                    return Err(illegal());
                }
            }
            EventBody::StudyEnded { .. } => {
                if !self.state.is_live() {
                    return Err(illegal());
                }
                next.state = Expired;
            }
        }
        Ok(next)
    }
}
