//! Daily measurement intake and instant bonus payment.

use chrono::{DateTime, Utc};

use super::{AuditRecord, ServiceError, Study};
use crate::domain::{
    local_time_of_day, study_day, DomainError, EventBody, LifecycleState, MeasurementPayload,
    NotificationKind, RoundParams, RoundResult,
};
use crate::payment::{PayQuote, PaymentEngine};
use crate::state::bonus_key;

/// A sub-task session is valid when it has at least `required` correct
/// rounds and ends on a correct one.
pub fn validate_rounds(rounds: &[RoundResult], required: u32) -> bool {
    let correct = rounds.iter().filter(|r| r.answer_correct).count();
    rounds.last().is_some_and(|r| r.answer_correct) && correct >= required as usize
}

/// Full structural check of a measurement: both sub-tasks valid, rounds in
/// order, the right task in each list, and no round repeating the previous
/// round's parameters.
pub fn check_payload(payload: &MeasurementPayload, required: u32) -> Result<(), String> {
    for (name, rounds, scroll) in [
        ("news-feed", &payload.scroll_rounds, true),
        ("object-count", &payload.swipe_rounds, false),
    ] {
        if !validate_rounds(rounds, required) {
            return Err(format!(
                "{name} task needs {required} correct rounds ending on a correct one"
            ));
        }
        for (i, r) in rounds.iter().enumerate() {
            if matches!(r.params, RoundParams::Scroll { .. }) != scroll {
                return Err(format!("{name} round {i} carries the wrong task parameters"));
            }
            if i > 0 {
                let prev = &rounds[i - 1];
                if r.round_index <= prev.round_index {
                    return Err(format!("{name} rounds out of order at {i}"));
                }
                if r.params == prev.params {
                    return Err(format!("{name} round {i} repeats the previous parameters"));
                }
            }
        }
    }
    Ok(())
}

impl Study {
    /// Records one daily measurement, pays its bonus and schedules the next
    /// day's reminders.
    ///
    /// A failed bonus payment does not fail the submission: the measurement
    /// is kept and the payment retried on later ticks under the same
    /// idempotency key.
    pub fn submit_measurement(
        &mut self,
        device_id: &str,
        payload: MeasurementPayload,
        now: DateTime<Utc>,
    ) -> Result<PayQuote, ServiceError> {
        let config = self.config().clone();
        let p = self
            .state()
            .participant(device_id)
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?
            .clone();
        match p.state {
            LifecycleState::CodeIssued | LifecycleState::Rejected => {
                return Err(ServiceError::NotEnrolled(device_id.to_string()))
            }
            LifecycleState::Completed | LifecycleState::Expired => {
                return Err(ServiceError::WindowExpired)
            }
            LifecycleState::Enrolled | LifecycleState::Active => {}
        }
        let day = match study_day(&p, now, config.duration_days) {
            Ok(d) => d,
            Err(DomainError::OutOfWindow { .. }) => return Err(ServiceError::WindowExpired),
            Err(_) => return Err(ServiceError::NotEnrolled(device_id.to_string())),
        };
        if day <= p.last_study_day {
            self.audit.push(AuditRecord {
                at: now,
                device_id: device_id.to_string(),
                note: format!("duplicate submission for day {day}"),
            });
            return Err(ServiceError::DuplicateDay(day));
        }
        check_payload(&payload, config.required_correct_rounds)
            .map_err(ServiceError::InvalidMeasurement)?;

        let worker = p.worker_id.clone();
        self.append(
            now,
            worker,
            EventBody::MeasurementSubmitted {
                device_id: device_id.to_string(),
                study_day: day,
                submitted_at: now,
                local_time: local_time_of_day(p.timezone, now),
                scroll_rounds: payload.scroll_rounds,
                swipe_rounds: payload.swipe_rounds,
                duration_ms: payload.duration_ms,
            },
        )?;
        // The evening reminder stays pending and is suppressed when it comes
        // due; anything else for today is no longer useful.
        self.cancel_where(
            device_id,
            |n| n.study_day == day && n.kind != NotificationKind::EveningConditional,
            crate::domain::CancelReason::Cancelled,
            now,
        )?;
        if self.state().participants[device_id].state == LifecycleState::Completed {
            self.cancel_where(device_id, |_| true, crate::domain::CancelReason::Cancelled, now)?;
        } else {
            self.schedule_after_submission(device_id, day)?;
        }

        self.unpaid.insert((device_id.to_string(), day));
        // Failures are retried by `tick`.
        let _ = self.pay_bonus(device_id, day);
        self.earnings(device_id)
    }

    /// Sends the bonus for one measurement and logs the receipt.
    pub(super) fn pay_bonus(&mut self, device_id: &str, day: u32) -> Result<(), ServiceError> {
        let state = self.state();
        let p = state
            .participant(device_id)
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?;
        let (Some(worker), Some(scheme_id)) = (p.worker_id.clone(), p.scheme_id) else {
            return Err(ServiceError::NotEnrolled(device_id.to_string()));
        };
        let key = bonus_key(&worker, day);
        if state.paid_keys.contains(&key) {
            self.unpaid.remove(&(device_id.to_string(), day));
            return Ok(());
        }
        let index = state
            .bonus_index(device_id, day)
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?;
        let scheme = self
            .config()
            .scheme(scheme_id)
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?;
        let amount = PaymentEngine::for_config(self.config())
            .bonus_amount(scheme, index)
            .map_err(|e| DomainError::Invalid(e.to_string()))?;
        let receipt = match self
            .crowd
            .send_bonus(&worker, amount, &format!("day {day}"), &key)
        {
            Ok(r) => r,
            Err(e) => {
                self.retry_pending = true;
                return Err(e.into());
            }
        };
        let now = self.clock.now();
        self.append(
            now,
            Some(worker),
            EventBody::BonusPaid {
                device_id: device_id.to_string(),
                study_day: day,
                bonus_index: index,
                amount,
                idempotency_key: key,
                receipt: receipt.id,
            },
        )?;
        self.unpaid.remove(&(device_id.to_string(), day));
        Ok(())
    }

    /// Current earnings and what is still to be earned.
    pub fn earnings(&self, device_id: &str) -> Result<PayQuote, ServiceError> {
        let p = self
            .state()
            .participant(device_id)
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?;
        let scheme = p
            .scheme_id
            .and_then(|s| self.config().scheme(s))
            .ok_or_else(|| ServiceError::NotEnrolled(device_id.to_string()))?;
        Ok(PaymentEngine::for_config(self.config()).quote(scheme, p.bonus_count))
    }
}
