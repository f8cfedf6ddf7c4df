use chrono::{DateTime, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Cents, WorkerId};

/// Parameters shown in one round of a sub-task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum RoundParams {
    /// News-feed scrolling: where the target article sits in the feed.
    Scroll { article_position: u32 },
    /// Object counting over a set of swiped images.
    Swipe {
        object_type: String,
        object_count: u32,
        image_count: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round_index: u32,
    pub params: RoundParams,
    pub answer_correct: bool,
}

/// What the app uploads after a measurement session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementPayload {
    pub scroll_rounds: Vec<RoundResult>,
    pub swipe_rounds: Vec<RoundResult>,
    pub duration_ms: u64,
}

/// One day's accepted submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub worker_id: WorkerId,
    pub study_day: u32,
    pub submitted_at: DateTime<Utc>,
    pub local_time: NaiveTime,
    pub scroll_rounds: Vec<RoundResult>,
    pub swipe_rounds: Vec<RoundResult>,
    /// Zero for the enrollment measurement, which is paid through the HIT reward.
    pub bonus_paid: Cents,
    pub duration_ms: u64,
}
