//! Recruitment HIT, verification codes, and the automatic review of
//! submitted assignments.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Due, ServiceError, Study};
use crate::domain::{
    local_time_of_day, next_local_midnight, ConsentRecord, Demographics, EventBody,
    LifecycleState, MeasurementPayload, RejectReason, SchemeId, WorkerId,
};
use crate::gateway::{Assignment, CrowdError, HitSpec};
use crate::state::{CodeState, Outcome, VerificationCode};

/// Uppercase letters and digits without I, O, 0 and 1.
pub const CODE_ALPHABET: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZ23456789";
pub const CODE_LEN: usize = 8;

/// How an approved worker is assigned a payment scheme.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SchemePolicy {
    /// HI, HC, LC, HI, ... in approval order.
    #[default]
    RoundRobin,
    /// Explicit assignment; unlisted workers fall back to round robin.
    Fixed(BTreeMap<WorkerId, SchemeId>),
}

impl SchemePolicy {
    fn assign(&self, worker_id: &str, approved_so_far: usize) -> SchemeId {
        const ORDER: [SchemeId; 3] = [SchemeId::HI, SchemeId::HC, SchemeId::LC];
        let fallback = ORDER[approved_so_far % ORDER.len()];
        match self {
            SchemePolicy::RoundRobin => fallback,
            SchemePolicy::Fixed(map) => map.get(worker_id).copied().unwrap_or(fallback),
        }
    }
}

/// What the app sends once on-boarding and the first measurement are done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentRequest {
    pub device_model: String,
    pub timezone: Tz,
    pub consent: ConsentRecord,
    pub demographics: Demographics,
    pub first_measurement: MeasurementPayload,
}

fn feedback(reason: RejectReason) -> &'static str {
    match reason {
        RejectReason::UnknownCode => "The verification code does not match any code shown by the app.",
        RejectReason::CodeConsumed => "This verification code has already been used.",
        RejectReason::CodeExpired => "This verification code has expired.",
        RejectReason::WorkerAlreadyAssociated => "Your worker ID is already registered with a device.",
        RejectReason::DeviceAlreadyAssociated => "This device is already registered to another worker.",
    }
}

impl Study {
    /// Publishes the single recruitment HIT. The study id is stored as the
    /// HIT annotation so a second publish, even from a restarted service,
    /// is detected.
    pub fn publish_enrollment_hit(&mut self) -> Result<String, ServiceError> {
        let config = self.config();
        let annotation = config.study_id.clone();
        let device = if config.allowed_models.is_empty() {
            "iPhone required".to_string()
        } else {
            format!("supported devices only: {}", config.allowed_models.join(", "))
        };
        let spec = HitSpec {
            title: format!(
                "Install our app and do a short daily task for {} days ({device})",
                config.duration_days
            ),
            description: format!(
                "Complete two short phone tasks once a day. You are paid {} now and an \
                 instant bonus for every daily task. This HIT can only be completed on a \
                 device that meets the requirement: {device}.",
                config.enrollment_pay
            ),
            reward: config.enrollment_pay,
            max_assignments: u32::MAX,
            annotation: annotation.clone(),
            qualification: None,
        };
        if let Some(existing) = self.crowd.find_hits(&annotation)?.into_iter().next() {
            self.hit_id = Some(existing.clone());
            return Err(ServiceError::DuplicateHit(existing));
        }
        let id = self.crowd.create_hit(&spec)?;
        self.hit_id = Some(id.clone());
        Ok(id)
    }

    /// The recruitment HIT, looked up on the platform if not yet known.
    pub fn enrollment_hit(&mut self) -> Result<String, ServiceError> {
        if let Some(id) = &self.hit_id {
            return Ok(id.clone());
        }
        let found = self.crowd.find_hits(&self.config().study_id)?;
        let id = found.into_iter().next().ok_or(ServiceError::NoEnrollmentHit)?;
        self.hit_id = Some(id.clone());
        Ok(id)
    }

    /// Validates the on-boarding payload and issues a fresh verification
    /// code. Repeating the call for a device still waiting on its code
    /// returns the same code.
    pub fn issue_code(
        &mut self,
        device_id: &str,
        request: EnrollmentRequest,
    ) -> Result<VerificationCode, ServiceError> {
        if let Some(p) = self.state().participant(device_id) {
            if p.state == LifecycleState::CodeIssued {
                let open = self
                    .state()
                    .codes
                    .values()
                    .find(|c| c.device_id == device_id && c.state == CodeState::Unused);
                if let Some(code) = open {
                    return Ok(code.clone());
                }
            }
            return Err(ServiceError::DeviceAlreadyOnboarded(device_id.to_string()));
        }
        if !request.consent.complete() {
            return Err(ServiceError::ConsentIncomplete);
        }
        request
            .demographics
            .validate()
            .map_err(|e| ServiceError::InvalidDemographics(e.to_string()))?;
        if !self.config().model_allowed(&request.device_model) {
            return Err(ServiceError::UnsupportedDevice(request.device_model));
        }
        super::check_payload(&request.first_measurement, self.config().required_correct_rounds)
            .map_err(ServiceError::InvalidMeasurement)?;

        let code = loop {
            let candidate: String = (0..CODE_LEN)
                .map(|_| CODE_ALPHABET[self.code_rng.random_range(0..CODE_ALPHABET.len())] as char)
                .collect();
            if !self.state().codes.contains_key(&candidate) {
                break candidate;
            }
        };
        let now = self.clock.now();
        self.append(
            now,
            None,
            EventBody::CodeIssued {
                device_id: device_id.to_string(),
                code: code.clone(),
                device_model: request.device_model,
                timezone: request.timezone,
                demographics: request.demographics,
                consent: request.consent,
                first_measurement: request.first_measurement,
            },
        )?;
        let issued = self.state().codes[&code].clone();
        self.agenda
            .insert((issued.expires_at, Due::ExpireCode(code)));
        Ok(issued)
    }

    /// Decides one assignment and tells the platform. The decision is logged
    /// before the platform call; calling again for a decided assignment only
    /// repeats the platform call.
    pub fn validate_submission(
        &mut self,
        worker_id: &str,
        assignment_id: &str,
        submitted_code: &str,
    ) -> Result<Outcome, ServiceError> {
        let assignment = self.crowd.assignment(assignment_id)?;
        if assignment.worker_id != worker_id {
            return Err(ServiceError::Gateway(CrowdError::UnknownAssignment(
                assignment_id.to_string(),
            )));
        }
        self.decide(worker_id, assignment_id, submitted_code)
    }

    /// Reviews every assignment the platform holds in Submitted state.
    /// Platform failures on individual assignments are left for the next
    /// round.
    pub fn review_submissions(&mut self) -> Result<Vec<(String, Outcome)>, ServiceError> {
        let hit = self.enrollment_hit()?;
        let submitted: Vec<Assignment> = self.crowd.submitted_assignments(&hit)?;
        let mut out = Vec::with_capacity(submitted.len());
        for a in submitted {
            match self.decide(&a.worker_id, &a.id, &a.answer) {
                Ok(outcome) => out.push((a.id, outcome)),
                Err(ServiceError::Gateway(_)) => self.retry_pending = true,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn decide(
        &mut self,
        worker_id: &str,
        assignment_id: &str,
        submitted_code: &str,
    ) -> Result<Outcome, ServiceError> {
        let outcome = match self.state().decisions.get(assignment_id) {
            Some(d) => d.outcome,
            None => self.record_decision(worker_id, assignment_id, submitted_code)?,
        };
        let result = match outcome {
            Outcome::Approved => self.crowd.approve_assignment(assignment_id),
            Outcome::Rejected(reason) => self.crowd.reject_assignment(assignment_id, feedback(reason)),
        };
        match result {
            Ok(()) | Err(CrowdError::AlreadyResolved { .. }) => Ok(outcome),
            Err(e) => {
                self.retry_pending = true;
                Err(e.into())
            }
        }
    }

    fn judge(&self, worker_id: &str, code: &str, now: DateTime<Utc>) -> Result<VerificationCode, RejectReason> {
        let state = self.state();
        let vc = state.codes.get(code).ok_or(RejectReason::UnknownCode)?;
        match vc.state {
            CodeState::Consumed => return Err(RejectReason::CodeConsumed),
            CodeState::Expired => return Err(RejectReason::CodeExpired),
            CodeState::Unused if now >= vc.expires_at => return Err(RejectReason::CodeExpired),
            CodeState::Unused => {}
        }
        if state.workers.contains_key(worker_id) {
            return Err(RejectReason::WorkerAlreadyAssociated);
        }
        if state
            .participant(&vc.device_id)
            .is_none_or(|p| p.state != LifecycleState::CodeIssued)
        {
            return Err(RejectReason::DeviceAlreadyAssociated);
        }
        Ok(vc.clone())
    }

    fn record_decision(
        &mut self,
        worker_id: &str,
        assignment_id: &str,
        submitted_code: &str,
    ) -> Result<Outcome, ServiceError> {
        let now = self.clock.now();
        let code = submitted_code.trim().to_ascii_uppercase();
        let vc = match self.judge(worker_id, &code, now) {
            Ok(vc) => vc,
            Err(reason) => {
                self.append(
                    now,
                    Some(worker_id.to_string()),
                    EventBody::EnrollmentRejected {
                        assignment_id: Some(assignment_id.to_string()),
                        device_id: None,
                        reason,
                    },
                )?;
                return Ok(Outcome::Rejected(reason));
            }
        };
        let approved_so_far = self.state().workers.len();
        let scheme = self.policy.assign(worker_id, approved_so_far);
        let worker = Some(worker_id.to_string());
        self.append(
            now,
            worker.clone(),
            EventBody::EnrollmentApproved {
                device_id: vc.device_id.clone(),
                assignment_id: assignment_id.to_string(),
                code: code.clone(),
                scheme,
            },
        )?;
        self.agenda.remove(&(vc.expires_at, Due::ExpireCode(code)));

        // The measurement taken during on-boarding becomes day 1.
        let tz = self.state().participants[&vc.device_id].timezone;
        let first = vc.first_measurement;
        self.append(
            now,
            worker,
            EventBody::MeasurementSubmitted {
                device_id: vc.device_id.clone(),
                study_day: 1,
                submitted_at: vc.issued_at,
                local_time: local_time_of_day(tz, vc.issued_at),
                scroll_rounds: first.scroll_rounds,
                swipe_rounds: first.swipe_rounds,
                duration_ms: first.duration_ms,
            },
        )?;
        self.schedule_after_submission(&vc.device_id, 1)?;
        self.agenda
            .insert((next_local_midnight(tz, now), Due::Rollover(vc.device_id)));
        Ok(Outcome::Approved)
    }

    /// Lets an unused code lapse; the device can no longer enroll.
    pub(super) fn expire_code(&mut self, code: &str, at: DateTime<Utc>) -> Result<(), ServiceError> {
        let Some(vc) = self.state().codes.get(code) else {
            return Ok(());
        };
        let device = vc.device_id.clone();
        let waiting = vc.state == CodeState::Unused
            && self
                .state()
                .participant(&device)
                .is_some_and(|p| p.state == LifecycleState::CodeIssued);
        if waiting {
            self.append(
                at,
                None,
                EventBody::EnrollmentRejected {
                    assignment_id: None,
                    device_id: Some(device),
                    reason: RejectReason::CodeExpired,
                },
            )?;
        }
        Ok(())
    }

    /// Grants a qualification to every worker who enrolled and publishes a
    /// follow-up survey HIT restricted to them. Returns the HIT id and the
    /// number of qualified workers.
    pub fn publish_survey(&mut self, reward: crate::domain::Cents) -> Result<(String, usize), ServiceError> {
        let name = format!("{}-participants", self.config().study_id);
        let qualification = self.crowd.create_qualification(&name)?;
        let workers: Vec<WorkerId> = self.state().workers.keys().cloned().collect();
        for w in &workers {
            self.crowd.grant_qualification(&qualification, w)?;
        }
        let hit = self.crowd.publish_survey_hit(&qualification, reward)?;
        Ok((hit, workers.len()))
    }
}
