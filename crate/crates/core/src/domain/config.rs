use std::fmt;
use std::str::FromStr;

use chrono::NaiveTime;
use serde::{Deserialize, Serialize};

use super::{Cents, DomainError};

/// Identifier of one of the three payment schemes used in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SchemeId {
    /// Low constant.
    LC,
    /// High constant.
    HC,
    /// High increasing.
    HI,
}

impl SchemeId {
    pub const ALL: [SchemeId; 3] = [SchemeId::LC, SchemeId::HC, SchemeId::HI];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::LC => "LC",
            SchemeId::HC => "HC",
            SchemeId::HI => "HI",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "LC" | "lc" => Ok(SchemeId::LC),
            "HC" | "hc" => Ok(SchemeId::HC),
            "HI" | "hi" => Ok(SchemeId::HI),
            other => Err(DomainError::InvalidConfig(format!("unknown scheme `{other}`"))),
        }
    }
}

/// How a scheme turns a bonus index into an amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchemeKind {
    Constant { amount: Cents },
    LinearIncreasing { base: Cents, increment: Cents },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentScheme {
    pub id: SchemeId,
    pub kind: SchemeKind,
}

impl PaymentScheme {
    pub const fn constant(id: SchemeId, amount: i64) -> Self {
        Self {
            id,
            kind: SchemeKind::Constant {
                amount: Cents(amount),
            },
        }
    }

    pub const fn increasing(id: SchemeId, base: i64, increment: i64) -> Self {
        Self {
            id,
            kind: SchemeKind::LinearIncreasing {
                base: Cents(base),
                increment: Cents(increment),
            },
        }
    }

    pub const fn low_constant() -> Self {
        Self::constant(SchemeId::LC, 88)
    }

    pub const fn high_constant() -> Self {
        Self::constant(SchemeId::HC, 113)
    }

    pub const fn high_increasing() -> Self {
        Self::increasing(SchemeId::HI, 40, 5)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        match self.kind {
            SchemeKind::Constant { amount } if amount.0 <= 0 => Err(DomainError::InvalidConfig(
                format!("scheme {}: constant amount must be positive", self.id),
            )),
            SchemeKind::LinearIncreasing { base, increment } if base.0 <= 0 || increment.0 < 0 => {
                Err(DomainError::InvalidConfig(format!(
                    "scheme {}: base must be positive and increment non-negative",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Parameters for a whole study run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    /// Tag attached to the enrollment HIT so a second publish can be detected.
    pub study_id: String,
    pub duration_days: u32,
    pub max_measurements: u32,
    pub enrollment_pay: Cents,
    pub schemes: Vec<PaymentScheme>,
    pub morning_reminder: NaiveTime,
    pub evening_reminder: NaiveTime,
    pub required_correct_rounds: u32,
    pub reengagement_enabled: bool,
    pub code_ttl_hours: u32,
    pub push_max_attempts: u32,
    /// Device models allowed to enroll. Empty means any model.
    pub allowed_models: Vec<String>,
    /// Seed for verification-code generation.
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            study_id: "daily-touch-study".to_string(),
            duration_days: 31,
            max_measurements: 31,
            enrollment_pay: Cents(100),
            schemes: vec![
                PaymentScheme::low_constant(),
                PaymentScheme::high_constant(),
                PaymentScheme::high_increasing(),
            ],
            morning_reminder: NaiveTime::from_hms_opt(9, 0, 0).expect("valid time"),
            evening_reminder: NaiveTime::from_hms_opt(19, 0, 0).expect("valid time"),
            required_correct_rounds: 5,
            reengagement_enabled: false,
            code_ttl_hours: 24,
            push_max_attempts: 3,
            allowed_models: Vec::new(),
            seed: 0x5eed,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |msg: &str| Err(DomainError::InvalidConfig(msg.to_string()));
        if self.duration_days < 1 {
            return bad("duration_days must be at least 1");
        }
        if self.max_measurements < 1 || self.max_measurements > self.duration_days {
            return bad("max_measurements must be in 1..=duration_days");
        }
        if self.morning_reminder >= self.evening_reminder {
            return bad("morning_reminder must be earlier than evening_reminder");
        }
        if self.enrollment_pay.0 <= 0 {
            return bad("enrollment_pay must be positive");
        }
        if self.required_correct_rounds == 0 {
            return bad("required_correct_rounds must be positive");
        }
        if self.push_max_attempts == 0 {
            return bad("push_max_attempts must be positive");
        }
        if self.schemes.is_empty() {
            return bad("at least one payment scheme is required");
        }
        for (i, s) in self.schemes.iter().enumerate() {
            s.validate()?;
            if self.schemes[..i].iter().any(|o| o.id == s.id) {
                return Err(DomainError::InvalidConfig(format!(
                    "scheme {} listed twice",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn scheme(&self, id: SchemeId) -> Option<&PaymentScheme> {
        self.schemes.iter().find(|s| s.id == id)
    }

    /// Number of bonus-paid measurements available after the enrollment one.
    pub fn max_bonuses(&self) -> u32 {
        self.max_measurements - 1
    }

    pub fn model_allowed(&self, model: &str) -> bool {
        self.allowed_models.is_empty() || self.allowed_models.iter().any(|m| m == model)
    }
}
