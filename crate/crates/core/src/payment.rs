//! Per-measurement bonus amounts, cumulative pay, earnings quotes and
//! equivalent hourly pay.
//!
//! The fixed enrollment reward pays for measurement 1. Bonus indices count
//! only the measurements after it, so the increasing scheme pays
//! `base + increment * (bonus_index - 1)` for the `bonus_index`-th bonus.

use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Cents, PaymentScheme, SchemeKind, StudyConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PaymentError {
    #[error("index {index} outside 1..={max}")]
    IndexOutOfRange { index: u32, max: u32 },
}

/// Equivalent hourly pay in whole cents per hour (rounded half-up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HourlyRate(pub i64);

impl HourlyRate {
    pub fn dollars_per_hour(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for HourlyRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", Cents(self.0).dollars())
    }
}

/// What the app shows after each submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayQuote {
    pub next_bonus: Cents,
    pub cumulative: Cents,
    pub remaining_potential: Cents,
    pub equivalent_hourly: HourlyRate,
}

/// Pay rules for a study: enrollment reward, measurement cap, and the time
/// model used for hourly pay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaymentEngine {
    pub enrollment_pay: Cents,
    pub max_measurements: u32,
    /// On-boarding time, in hundredths of a second.
    pub onboarding_centis: i64,
    /// Median daily-task time, in hundredths of a second.
    pub task_centis: i64,
}

impl Default for PaymentEngine {
    fn default() -> Self {
        Self {
            enrollment_pay: Cents(100),
            max_measurements: 31,
            onboarding_centis: 480_00,
            task_centis: 241_44,
        }
    }
}

impl PaymentEngine {
    pub fn for_config(config: &StudyConfig) -> Self {
        Self {
            enrollment_pay: config.enrollment_pay,
            max_measurements: config.max_measurements,
            ..Self::default()
        }
    }

    pub fn max_bonuses(&self) -> u32 {
        self.max_measurements - 1
    }

    pub fn bonus_amount(&self, scheme: &PaymentScheme, bonus_index: u32) -> Result<Cents, PaymentError> {
        if bonus_index == 0 || bonus_index > self.max_bonuses() {
            return Err(PaymentError::IndexOutOfRange {
                index: bonus_index,
                max: self.max_bonuses(),
            });
        }
        Ok(match scheme.kind {
            SchemeKind::Constant { amount } => amount,
            SchemeKind::LinearIncreasing { base, increment } => {
                Cents(base.0 + increment.0 * i64::from(bonus_index - 1))
            }
        })
    }

    /// Total received after `n` measurements, enrollment reward included.
    pub fn cumulative_pay(&self, scheme: &PaymentScheme, n: u32) -> Result<Cents, PaymentError> {
        self.check_measurements(n)?;
        let bonuses: Cents = (1..n)
            .map(|j| self.bonus_amount(scheme, j))
            .sum::<Result<Cents, _>>()?;
        Ok(self.enrollment_pay + bonuses)
    }

    /// Bonuses still obtainable after `bonus_count` have been earned.
    /// Saturates at zero once the study is complete.
    pub fn remaining_potential(&self, scheme: &PaymentScheme, bonus_count: u32) -> Cents {
        (bonus_count.saturating_add(1)..=self.max_bonuses())
            .map(|j| self.bonus_amount(scheme, j).expect("index in range"))
            .sum()
    }

    /// Exact hourly pay in dollars per hour.
    pub fn hourly_exact(&self, scheme: &PaymentScheme, n: u32) -> Result<Ratio<i64>, PaymentError> {
        let pay = self.cumulative_pay(scheme, n)?;
        let centis = self.onboarding_centis + i64::from(n - 1) * self.task_centis;
        // (pay / 100 dollars) / (centis / 100 / 3600 hours)
        Ok(Ratio::new(pay.0 * 3600, centis))
    }

    pub fn equivalent_hourly(&self, scheme: &PaymentScheme, n: u32) -> Result<HourlyRate, PaymentError> {
        let exact = self.hourly_exact(scheme, n)?;
        Ok(HourlyRate(round_half_up(exact * 100)))
    }

    /// Quote for a participant who has earned `bonus_count` bonuses.
    pub fn quote(&self, scheme: &PaymentScheme, bonus_count: u32) -> PayQuote {
        let bonus_count = bonus_count.min(self.max_bonuses());
        let next_bonus = if bonus_count < self.max_bonuses() {
            self.bonus_amount(scheme, bonus_count + 1).expect("index in range")
        } else {
            Cents::ZERO
        };
        let n = bonus_count + 1;
        PayQuote {
            next_bonus,
            cumulative: self.cumulative_pay(scheme, n).expect("n in range"),
            remaining_potential: self.remaining_potential(scheme, bonus_count),
            equivalent_hourly: self.equivalent_hourly(scheme, n).expect("n in range"),
        }
    }

    fn check_measurements(&self, n: u32) -> Result<(), PaymentError> {
        if n == 0 || n > self.max_measurements {
            Err(PaymentError::IndexOutOfRange {
                index: n,
                max: self.max_measurements,
            })
        } else {
            Ok(())
        }
    }
}

fn round_half_up(x: Ratio<i64>) -> i64 {
    debug_assert!(x >= Ratio::zero());
    (x + Ratio::new(1, 2)).floor().to_integer()
}

/// Float view of an exact rate, for reports.
pub fn ratio_to_f64(r: Ratio<i64>) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}
