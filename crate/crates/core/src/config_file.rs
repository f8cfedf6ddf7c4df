//! Plain-text configuration files.
//!
//! One `key = value` pair per line; blank lines and lines starting with `#`
//! are ignored. Study settings use bare keys, simulator settings `sim.*` and
//! worker behavior `profile.*`. Keys not present keep their defaults.
//!
//! ```text
//! duration_days = 31
//! scheme.HI = increasing 40 5
//! scheme.LC = constant 88
//! morning_reminder = 09:00
//! sim.workers = HI:44, HC:54, LC:89
//! profile.hazard = 0, 0.2, 0.32, 0.44, 0.56
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{DateTime, NaiveTime, Utc};
use chrono_tz::Tz;

use crate::domain::{Cents, PaymentScheme, SchemeId, SchemeKind, StudyConfig};
use crate::gateway::{FaultConfig, FaultMode};
use crate::sim::SimConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("line {line}: `{key}` given twice")]
    Repeated { line: usize, key: String },
    #[error(transparent)]
    Invalid(#[from] crate::domain::DomainError),
}

/// Study and simulator settings read from one file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Settings {
    pub study: StudyConfig,
    pub sim: SimConfig,
}

/// Splits a file into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: "expected `key = value`".into(),
        })?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, message: "empty key".into() });
        }
        if out.iter().any(|(_, k, _)| *k == key) {
            return Err(ConfigError::Repeated { line, key });
        }
        out.push((line, key, v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn time(v: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(v, "%H:%M")
        .or_else(|_| NaiveTime::parse_from_str(v, "%H:%M:%S"))
        .map_err(|e| e.to_string())
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn pair(item: &str) -> Result<(&str, &str), String> {
    item.rsplit_once(':')
        .map(|(a, b)| (a.trim(), b.trim()))
        .ok_or_else(|| format!("expected `name:value`, got `{item}`"))
}

fn floats(v: &str) -> Result<Vec<f64>, String> {
    list(v).map(num::<f64>).collect()
}

fn scheme_kind(v: &str) -> Result<SchemeKind, String> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    match parts.as_slice() {
        ["constant", amount] => Ok(SchemeKind::Constant { amount: Cents(num(amount)?) }),
        ["increasing", base, inc] => Ok(SchemeKind::LinearIncreasing {
            base: Cents(num(base)?),
            increment: Cents(num(inc)?),
        }),
        _ => Err("expected `constant <cents>` or `increasing <base> <increment>`".into()),
    }
}

fn fault(v: &str) -> Result<FaultConfig, String> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    let (rate, mode) = match parts.as_slice() {
        [rate] => (*rate, "before"),
        [rate, mode] => (*rate, *mode),
        _ => return Err("expected `<rate> [before|after|mixed]`".into()),
    };
    let mode = match mode {
        "before" => FaultMode::BeforeEffect,
        "after" => FaultMode::AfterEffect,
        "mixed" => FaultMode::Mixed,
        other => return Err(format!("unknown fault mode `{other}`")),
    };
    Ok(FaultConfig {
        failure_rate: num(rate)?,
        mode,
        latency_ms: 0,
    })
}

/// Parses `HI:44, HC:54, LC:89`.
pub fn parse_workers(v: &str) -> Result<BTreeMap<SchemeId, usize>, String> {
    let mut out = BTreeMap::new();
    for item in list(v) {
        let (s, n) = pair(item)?;
        let scheme: SchemeId = s.parse().map_err(|e: crate::domain::DomainError| e.to_string())?;
        if out.insert(scheme, num(n)?).is_some() {
            return Err(format!("scheme {scheme} given twice"));
        }
    }
    Ok(out)
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        let mut schemes: Vec<PaymentScheme> = Vec::new();
        for (line, key, value) in parse_pairs(text)? {
            let bad = |message: String| ConfigError::BadValue {
                line,
                key: key.clone(),
                message,
            };
            if let Some(id) = key.strip_prefix("scheme.") {
                let id: SchemeId = id.parse().map_err(|_| ConfigError::UnknownKey { line, key: key.clone() })?;
                schemes.push(PaymentScheme { id, kind: scheme_kind(&value).map_err(bad)? });
                continue;
            }
            s.set(&key, &value).map_err(|e| match e {
                None => ConfigError::UnknownKey { line, key: key.clone() },
                Some(m) => bad(m),
            })?;
        }
        if !schemes.is_empty() {
            s.study.schemes = schemes;
        }
        s.study.validate()?;
        s.sim.validate()?;
        Ok(s)
    }

    /// `Err(None)` means the key is unknown.
    fn set(&mut self, key: &str, v: &str) -> Result<(), Option<String>> {
        let (study, sim) = (&mut self.study, &mut self.sim);
        let p = &mut sim.profile;
        match key {
            "study_id" => study.study_id = v.to_string(),
            "duration_days" => study.duration_days = num(v)?,
            "max_measurements" => study.max_measurements = num(v)?,
            "enrollment_pay" => study.enrollment_pay = Cents(num(v)?),
            "morning_reminder" => study.morning_reminder = time(v)?,
            "evening_reminder" => study.evening_reminder = time(v)?,
            "required_correct_rounds" => study.required_correct_rounds = num(v)?,
            "reengagement_enabled" => study.reengagement_enabled = boolean(v)?,
            "code_ttl_hours" => study.code_ttl_hours = num(v)?,
            "push_max_attempts" => study.push_max_attempts = num(v)?,
            "allowed_models" => study.allowed_models = list(v).map(String::from).collect(),
            "code_seed" => study.seed = num(v)?,
            "sim.seed" => sim.seed = num(v)?,
            "sim.workers" => sim.workers = parse_workers(v)?,
            "sim.timezones" => {
                sim.timezones = list(v)
                    .map(|item| {
                        let (tz, w) = pair(item)?;
                        Ok((tz.parse::<Tz>().map_err(|e| e.to_string())?, num(w)?))
                    })
                    .collect::<Result<_, String>>()?
            }
            "sim.jitter" => sim.jitter = num(v)?,
            "sim.start" => {
                sim.start = DateTime::parse_from_rfc3339(v)
                    .map_err(|e| e.to_string())?
                    .with_timezone(&Utc)
            }
            "sim.enrollment_spread_days" => sim.enrollment_spread_days = num(v)?,
            "sim.unassociated_installs" => sim.unassociated_installs = num(v)?,
            "sim.wrong_code_rate" => sim.wrong_code_rate = num(v)?,
            "sim.duplicate_rate" => sim.duplicate_rate = num(v)?,
            "sim.crowd_faults" => sim.crowd_faults = fault(v)?,
            "sim.push_faults" => sim.push_faults = fault(v)?,
            "profile.p_abandon_after_first" => p.p_abandon_after_first = num(v)?,
            "profile.base_daily_completion" => p.base_daily_completion = num(v)?,
            "profile.notification_responsiveness" => p.notification_responsiveness = num(v)?,
            "profile.hazard" => p.hazard = floats(v)?,
            "profile.scheme_sensitivity" => {
                p.scheme_sensitivity = list(v)
                    .map(|item| {
                        let (s, m) = pair(item)?;
                        Ok((s.parse::<SchemeId>().map_err(|e| e.to_string())?, num(m)?))
                    })
                    .collect::<Result<_, String>>()?
            }
            "profile.diurnal" => {
                let w = floats(v)?;
                p.diurnal = w
                    .try_into()
                    .map_err(|w: Vec<f64>| format!("expected 24 weights, got {}", w.len()))?;
            }
            _ => return Err(None),
        }
        Ok(())
    }

    /// Renders every setting in the file format; `parse(render())` gives
    /// back the same settings.
    pub fn render(&self) -> String {
        let (st, sim, p) = (&self.study, &self.sim, &self.sim.profile);
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        let mut o = String::new();
        let _ = writeln!(o, "# study");
        let _ = writeln!(o, "study_id = {}", st.study_id);
        let _ = writeln!(o, "duration_days = {}", st.duration_days);
        let _ = writeln!(o, "max_measurements = {}", st.max_measurements);
        let _ = writeln!(o, "enrollment_pay = {}", st.enrollment_pay.0);
        for s in &st.schemes {
            let kind = match s.kind {
                SchemeKind::Constant { amount } => format!("constant {}", amount.0),
                SchemeKind::LinearIncreasing { base, increment } => {
                    format!("increasing {} {}", base.0, increment.0)
                }
            };
            let _ = writeln!(o, "scheme.{} = {kind}", s.id);
        }
        let _ = writeln!(o, "morning_reminder = {}", st.morning_reminder.format("%H:%M:%S"));
        let _ = writeln!(o, "evening_reminder = {}", st.evening_reminder.format("%H:%M:%S"));
        let _ = writeln!(o, "required_correct_rounds = {}", st.required_correct_rounds);
        let _ = writeln!(o, "reengagement_enabled = {}", st.reengagement_enabled);
        let _ = writeln!(o, "code_ttl_hours = {}", st.code_ttl_hours);
        let _ = writeln!(o, "push_max_attempts = {}", st.push_max_attempts);
        let _ = writeln!(o, "allowed_models = {}", st.allowed_models.join(", "));
        let _ = writeln!(o, "code_seed = {}", st.seed);
        let _ = writeln!(o, "\n# simulator");
        let _ = writeln!(o, "sim.seed = {}", sim.seed);
        let workers: Vec<String> = sim.workers.iter().map(|(s, n)| format!("{s}:{n}")).collect();
        let _ = writeln!(o, "sim.workers = {}", workers.join(", "));
        let tzs: Vec<String> = sim.timezones.iter().map(|(t, w)| format!("{}:{w}", t.name())).collect();
        let _ = writeln!(o, "sim.timezones = {}", tzs.join(", "));
        let _ = writeln!(o, "sim.jitter = {}", sim.jitter);
        let _ = writeln!(o, "sim.start = {}", sim.start.to_rfc3339());
        let _ = writeln!(o, "sim.enrollment_spread_days = {}", sim.enrollment_spread_days);
        let _ = writeln!(o, "sim.unassociated_installs = {}", sim.unassociated_installs);
        let _ = writeln!(o, "sim.wrong_code_rate = {}", sim.wrong_code_rate);
        let _ = writeln!(o, "sim.duplicate_rate = {}", sim.duplicate_rate);
        for (name, f) in [("crowd", &sim.crowd_faults), ("push", &sim.push_faults)] {
            let mode = match f.mode {
                FaultMode::BeforeEffect => "before",
                FaultMode::AfterEffect => "after",
                FaultMode::Mixed => "mixed",
            };
            let _ = writeln!(o, "sim.{name}_faults = {} {mode}", f.failure_rate);
        }
        let _ = writeln!(o, "\n# worker behavior (fitted by `dailystudy calibrate`)");
        let _ = writeln!(o, "profile.p_abandon_after_first = {}", p.p_abandon_after_first);
        let _ = writeln!(o, "profile.base_daily_completion = {}", p.base_daily_completion);
        let _ = writeln!(o, "profile.notification_responsiveness = {}", p.notification_responsiveness);
        let _ = writeln!(o, "profile.hazard = {}", join(&p.hazard));
        let sens: Vec<String> = p.scheme_sensitivity.iter().map(|(s, m)| format!("{s}:{m}")).collect();
        let _ = writeln!(o, "profile.scheme_sensitivity = {}", sens.join(", "));
        let _ = writeln!(o, "profile.diurnal = {}", join(&p.diurnal));
        o
    }
}
