//! Reminder scheduling and the dispatch loop.

use chrono::{DateTime, Duration, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Due, ServiceError, Study};
use crate::domain::{
    local_date, local_instant, next_local_midnight, CancelReason, DeviceId, EventBody,
    NotificationKind, WorkerId,
};
use crate::state::{NotificationState, ScheduledNotification};

/// A reminder that reached the push service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatched {
    pub id: u64,
    pub device_id: DeviceId,
    pub worker_id: WorkerId,
    pub kind: NotificationKind,
    pub study_day: u32,
    pub at: DateTime<Utc>,
}

fn message(kind: NotificationKind, day: u32) -> String {
    match kind {
        NotificationKind::Morning => format!("Good morning! Your day {day} task is ready."),
        NotificationKind::EveningConditional => {
            format!("You have not done today's task yet (day {day}). There is still time.")
        }
        NotificationKind::Reengagement => {
            format!("We missed you yesterday. Your day {day} task is ready.")
        }
    }
}

impl Study {
    /// UTC instant of a local wall-clock time on a given study day.
    fn day_instant(&self, device_id: &str, day: u32, time: NaiveTime) -> Option<DateTime<Utc>> {
        let p = self.state().participant(device_id)?;
        let tz = p.timezone;
        let first = local_date(tz, p.enrolled_at?);
        let date = first + chrono::Days::new(u64::from(day - 1));
        Some(local_instant(tz, date, time))
    }

    fn schedule(
        &mut self,
        device_id: &str,
        kind: NotificationKind,
        day: u32,
        time: NaiveTime,
    ) -> Result<Option<ScheduledNotification>, ServiceError> {
        let Some(fire_at) = self.day_instant(device_id, day, time) else {
            return Ok(None);
        };
        let id = self.state().next_notification_id();
        let worker = self.worker_of(device_id);
        let now = self.clock.now();
        self.append(
            now,
            worker,
            EventBody::NotificationScheduled {
                id,
                device_id: device_id.to_string(),
                notification: kind,
                fire_at,
                study_day: day,
            },
        )?;
        self.agenda.insert((fire_at, Due::Notify(id)));
        Ok(self.state().notifications.get(&id).cloned())
    }

    /// Queues the next day's morning reminder and the conditional evening
    /// one. Nothing is queued once the window or the participant is done.
    pub fn schedule_after_submission(
        &mut self,
        device_id: &str,
        day: u32,
    ) -> Result<Vec<ScheduledNotification>, ServiceError> {
        let live = self
            .state()
            .participant(device_id)
            .is_some_and(|p| p.state.is_live());
        let next = day + 1;
        if !live || next > self.config().duration_days {
            return Ok(Vec::new());
        }
        let morning = self.config().morning_reminder;
        let evening = self.config().evening_reminder;
        let mut out = Vec::with_capacity(2);
        for (kind, time) in [
            (NotificationKind::Morning, morning),
            (NotificationKind::EveningConditional, evening),
        ] {
            out.extend(self.schedule(device_id, kind, next, time)?);
        }
        Ok(out)
    }

    /// Cancels every pending reminder for one study day. Returns how many
    /// were cancelled.
    pub fn cancel_for_day(&mut self, device_id: &str, day: u32) -> Result<usize, ServiceError> {
        let now = self.clock.now();
        self.cancel_where(device_id, |n| n.study_day == day, CancelReason::Cancelled, now)
    }

    pub(super) fn cancel_where(
        &mut self,
        device_id: &str,
        pred: impl Fn(&ScheduledNotification) -> bool,
        reason: CancelReason,
        at: DateTime<Utc>,
    ) -> Result<usize, ServiceError> {
        let targets: Vec<(u64, DateTime<Utc>)> = self
            .state()
            .pending_notifications()
            .filter(|n| n.device_id == device_id && pred(n))
            .map(|n| (n.id, n.fire_at))
            .collect();
        for &(id, fire_at) in &targets {
            self.resolve(id, fire_at, reason, at)?;
        }
        Ok(targets.len())
    }

    fn resolve(
        &mut self,
        id: u64,
        fire_at: DateTime<Utc>,
        reason: CancelReason,
        at: DateTime<Utc>,
    ) -> Result<(), ServiceError> {
        let n = &self.state().notifications[&id];
        let device_id = n.device_id.clone();
        let worker = Some(n.worker_id.clone());
        self.append(
            at,
            worker,
            EventBody::NotificationCancelled {
                id,
                device_id,
                reason,
            },
        )?;
        self.agenda.remove(&(fire_at, Due::Notify(id)));
        self.push_failures.remove(&id);
        Ok(())
    }

    /// After a missed day, optionally queues one reminder for the following
    /// morning. Off by default.
    pub fn schedule_reengagement(
        &mut self,
        device_id: &str,
        missed_day: u32,
    ) -> Result<Option<ScheduledNotification>, ServiceError> {
        let config = self.config();
        if !config.reengagement_enabled || missed_day + 1 > config.duration_days {
            return Ok(None);
        }
        let morning = config.morning_reminder;
        let state = self.state();
        let live = state.participant(device_id).is_some_and(|p| p.state.is_live());
        let day = missed_day + 1;
        let already = state
            .notifications
            .values()
            .any(|n| n.device_id == device_id && n.study_day == day);
        if !live || state.has_record(device_id, missed_day) || already {
            return Ok(None);
        }
        self.schedule(device_id, NotificationKind::Reengagement, day, morning)
    }

    /// Runs all work due at or before `now`: code expiry, day rollovers and
    /// reminder dispatch in time order, then platform work (reviewing
    /// submitted assignments, retrying unconfirmed bonuses). Returns the
    /// reminders delivered.
    pub fn tick(&mut self, now: DateTime<Utc>) -> Result<Vec<Dispatched>, ServiceError> {
        self.last_tick = Some(now);
        self.retry_pending = false;
        let mut sent = Vec::new();
        while let Some((at, due)) = self.agenda.first().cloned() {
            if at > now {
                break;
            }
            self.agenda.pop_first();
            match due {
                Due::ExpireCode(code) => self.expire_code(&code, at)?,
                Due::Rollover(device) => self.rollover(&device, at)?,
                Due::Notify(id) => sent.extend(self.dispatch(id, now)?),
            }
        }

        match self.review_submissions() {
            Ok(_) | Err(ServiceError::NoEnrollmentHit) => {}
            Err(ServiceError::Gateway(_)) => self.retry_pending = true,
            Err(e) => return Err(e),
        }
        let unpaid: Vec<_> = self.unpaid.iter().cloned().collect();
        for (device, day) in unpaid {
            match self.pay_bonus(&device, day) {
                Ok(()) | Err(ServiceError::Gateway(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(sent)
    }

    fn dispatch(&mut self, id: u64, now: DateTime<Utc>) -> Result<Option<Dispatched>, ServiceError> {
        let Some(n) = self.state().notifications.get(&id).cloned() else {
            return Ok(None);
        };
        if n.state != NotificationState::Pending {
            return Ok(None);
        }
        let live = self
            .state()
            .participant(&n.device_id)
            .is_some_and(|p| p.state.is_live());
        if !live {
            self.resolve(id, n.fire_at, CancelReason::Cancelled, now)?;
            return Ok(None);
        }
        if self.state().has_record(&n.device_id, n.study_day) {
            self.resolve(id, n.fire_at, CancelReason::Suppressed, now)?;
            return Ok(None);
        }
        match self.push.send(&n.device_id, &message(n.kind, n.study_day)) {
            Ok(()) => {
                self.append(
                    now,
                    Some(n.worker_id.clone()),
                    EventBody::NotificationSent {
                        id,
                        device_id: n.device_id.clone(),
                    },
                )?;
                self.push_failures.remove(&id);
                Ok(Some(Dispatched {
                    id,
                    device_id: n.device_id,
                    worker_id: n.worker_id,
                    kind: n.kind,
                    study_day: n.study_day,
                    at: now,
                }))
            }
            Err(_) => {
                let failures = self.push_failures.entry(id).or_insert(0);
                *failures += 1;
                if *failures >= self.config().push_max_attempts {
                    self.resolve(id, n.fire_at, CancelReason::DeliveryFailed, now)?;
                } else {
                    self.agenda
                        .insert((now + Duration::minutes(1), Due::Notify(id)));
                }
                Ok(None)
            }
        }
    }

    /// Local midnight for one participant: closes the window after the last
    /// day, otherwise offers a re-engagement reminder after a missed day.
    fn rollover(&mut self, device_id: &str, at: DateTime<Utc>) -> Result<(), ServiceError> {
        let Some(p) = self.state().participant(device_id).cloned() else {
            return Ok(());
        };
        let Some(enrolled_at) = p.enrolled_at else {
            return Ok(());
        };
        if !p.state.is_live() {
            return Ok(());
        }
        let tz = p.timezone;
        let day = (local_date(tz, at) - local_date(tz, enrolled_at)).num_days() + 1;
        let day = u32::try_from(day).unwrap_or(0);
        if day > self.config().duration_days {
            self.cancel_where(device_id, |_| true, CancelReason::Cancelled, at)?;
            self.append(
                at,
                p.worker_id.clone(),
                EventBody::StudyEnded {
                    device_id: device_id.to_string(),
                },
            )?;
            return Ok(());
        }
        if day >= 2 {
            self.schedule_reengagement(device_id, day - 1)?;
        }
        self.agenda
            .insert((next_local_midnight(tz, at), Due::Rollover(device_id.to_string())));
        Ok(())
    }
}
