use std::collections::BTreeMap;

use chrono::NaiveTime;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainError, SchemeId};

/// How simulated workers behave. The defaults are calibration outputs, not
/// measured values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorProfile {
    /// Chance of never coming back after the enrollment measurement.
    pub p_abandon_after_first: f64,
    /// Chance of doing the day's task unprompted.
    pub base_daily_completion: f64,
    /// Chance of doing the task within ten minutes of a reminder.
    pub notification_responsiveness: f64,
    /// Drop-out probability by number of consecutive missed days; the last
    /// entry applies to all longer streaks.
    pub hazard: Vec<f64>,
    /// Multiplier on `base_daily_completion` per scheme.
    pub scheme_sensitivity: BTreeMap<SchemeId, f64>,
    /// Relative weight of each local hour for unprompted completions.
    pub diurnal: [f64; 24],
}

impl Default for BehaviorProfile {
    fn default() -> Self {
        let mut diurnal = [1.0; 24];
        for w in diurnal.iter_mut().take(7) {
            *w = 0.5;
        }
        diurnal[23] = 0.7;
        Self {
            p_abandon_after_first: 0.2,
            base_daily_completion: 0.88,
            notification_responsiveness: 0.5,
            hazard: vec![0.0, 0.2, 0.32, 0.44, 0.56],
            scheme_sensitivity: BTreeMap::from([
                (SchemeId::LC, 1.0),
                (SchemeId::HC, 1.0),
                (SchemeId::HI, 1.04),
            ]),
            diurnal,
        }
    }
}

/// What the worker knows when deciding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayState {
    pub day_index: u32,
    pub notifications_received_today: u32,
    pub missed_streak: u32,
    /// Local time of the reminder being reacted to; `None` at the start of
    /// the day.
    pub reminder_at: Option<NaiveTime>,
    pub scheme: SchemeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    CompleteAt(NaiveTime),
    Skip,
    DropPermanently,
}

fn check_prob(name: &str, p: f64) -> Result<(), DomainError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DomainError::InvalidConfig(format!("{name} = {p} is not a probability")))
    }
}

impl BehaviorProfile {
    pub fn validate(&self) -> Result<(), DomainError> {
        check_prob("p_abandon_after_first", self.p_abandon_after_first)?;
        check_prob("base_daily_completion", self.base_daily_completion)?;
        check_prob("notification_responsiveness", self.notification_responsiveness)?;
        if self.hazard.is_empty() {
            return Err(DomainError::InvalidConfig("hazard needs at least one value".into()));
        }
        for (i, &h) in self.hazard.iter().enumerate() {
            check_prob(&format!("hazard[{i}]"), h)?;
            if i > 0 && h < self.hazard[i - 1] {
                return Err(DomainError::InvalidConfig(
                    "hazard must not decrease with the missed streak".into(),
                ));
            }
        }
        for (s, &m) in &self.scheme_sensitivity {
            if !(m.is_finite() && m >= 0.0) {
                return Err(DomainError::InvalidConfig(format!("sensitivity for {s} = {m}")));
            }
        }
        if self.diurnal.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.diurnal.iter().sum::<f64>() <= 0.0
        {
            return Err(DomainError::InvalidConfig("diurnal weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    pub fn terminal_hazard(&self, missed_streak: u32) -> f64 {
        let i = (missed_streak as usize).min(self.hazard.len() - 1);
        self.hazard[i]
    }

    pub fn daily_completion(&self, scheme: SchemeId) -> f64 {
        let m = self.scheme_sensitivity.get(&scheme).copied().unwrap_or(1.0);
        (self.base_daily_completion * m).clamp(0.0, 1.0)
    }

    /// Local time of day drawn from the diurnal weights using two uniforms.
    pub fn diurnal_time(&self, u_hour: f64, u_within: f64) -> NaiveTime {
        let total: f64 = self.diurnal.iter().sum();
        let mut target = u_hour * total;
        let mut hour = 23;
        for (h, &w) in self.diurnal.iter().enumerate() {
            if target < w {
                hour = h;
                break;
            }
            target -= w;
        }
        let secs = (u_within * 3600.0).floor().min(3599.0) as u32;
        NaiveTime::from_hms_opt(hour as u32, secs / 60, secs % 60).expect("valid time")
    }
}

/// Draws the worker's choice for one decision point.
///
/// The number of values taken from `rng` depends only on whether this is the
/// start of the day (five) or a reminder (two), never on the outcome, so
/// runs that differ in one parameter stay coupled draw for draw.
pub fn worker_day_decision<R: Rng>(profile: &BehaviorProfile, day: DayState, rng: &mut R) -> Decision {
    match day.reminder_at {
        None => {
            let u_abandon: f64 = rng.random();
            let u_drop: f64 = rng.random();
            let u_done: f64 = rng.random();
            let u_hour: f64 = rng.random();
            let u_within: f64 = rng.random();
            if day.day_index == 2 && u_abandon < profile.p_abandon_after_first {
                return Decision::DropPermanently;
            }
            if u_drop < profile.terminal_hazard(day.missed_streak) {
                return Decision::DropPermanently;
            }
            if u_done < profile.daily_completion(day.scheme) {
                Decision::CompleteAt(profile.diurnal_time(u_hour, u_within))
            } else {
                Decision::Skip
            }
        }
        Some(at) => {
            let u_respond: f64 = rng.random();
            let u_delay: f64 = rng.random();
            if u_respond < profile.notification_responsiveness {
                let secs = (u_delay * 600.0).floor().min(599.0) as i64;
                let (t, _) = at.overflowing_add_signed(chrono::Duration::seconds(secs));
                // A reminder just before midnight must not push the answer
                // into the next day.
                Decision::CompleteAt(if t < at { NaiveTime::from_hms_opt(23, 59, 59).expect("valid") } else { t })
            } else {
                Decision::Skip
            }
        }
    }
}
