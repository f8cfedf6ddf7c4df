//! Local-calendar arithmetic. Study days are local calendar days in the
//! timezone captured at enrollment.

use chrono::{DateTime, Duration, LocalResult, NaiveDate, NaiveTime, TimeZone, Utc};
use chrono_tz::Tz;

use super::{DomainError, Participant};

pub fn local_date(tz: Tz, at: DateTime<Utc>) -> NaiveDate {
    at.with_timezone(&tz).date_naive()
}

pub fn local_time_of_day(tz: Tz, at: DateTime<Utc>) -> NaiveTime {
    at.with_timezone(&tz).time()
}

/// UTC instant of a local wall-clock time.
///
/// Ambiguous times (clocks going back) resolve to the earlier instant; times
/// inside a spring-forward gap move forward to the first valid minute.
pub fn local_instant(tz: Tz, date: NaiveDate, time: NaiveTime) -> DateTime<Utc> {
    let mut naive = date.and_time(time);
    for _ in 0..=180 {
        match tz.from_local_datetime(&naive) {
            LocalResult::Single(t) => return t.with_timezone(&Utc),
            LocalResult::Ambiguous(a, b) => return a.min(b).with_timezone(&Utc),
            LocalResult::None => naive += Duration::minutes(1),
        }
    }
    // No real zone has a gap longer than three hours.
    Utc.from_utc_datetime(&date.and_time(time))
}

/// First local midnight strictly after `at`.
pub fn next_local_midnight(tz: Tz, at: DateTime<Utc>) -> DateTime<Utc> {
    let tomorrow = local_date(tz, at).succ_opt().expect("date in range");
    local_instant(tz, tomorrow, NaiveTime::MIN)
}

/// 1-based index of the local calendar day of `at`, where the enrollment day
/// is day 1.
pub fn study_day(
    participant: &Participant,
    at: DateTime<Utc>,
    duration_days: u32,
) -> Result<u32, DomainError> {
    let enrolled_at = participant.enrolled_at.ok_or(DomainError::NotEnrolled)?;
    if at < enrolled_at {
        return Err(DomainError::BeforeEnrollment(at));
    }
    let tz = participant.timezone;
    let days = (local_date(tz, at) - local_date(tz, enrolled_at)).num_days();
    let day = u32::try_from(days + 1).unwrap_or(u32::MAX);
    if day > duration_days {
        return Err(DomainError::OutOfWindow {
            day,
            duration: duration_days,
        });
    }
    Ok(day)
}
