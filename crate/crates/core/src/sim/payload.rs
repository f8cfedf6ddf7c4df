use rand::Rng;

use crate::domain::{MeasurementPayload, RoundParams, RoundResult};

const OBJECTS: [&str; 6] = ["car", "dog", "tree", "cup", "bird", "chair"];

fn scroll_params<R: Rng>(rng: &mut R) -> RoundParams {
    RoundParams::Scroll {
        article_position: rng.random_range(1..=12),
    }
}

fn swipe_params<R: Rng>(rng: &mut R) -> RoundParams {
    RoundParams::Swipe {
        object_type: OBJECTS[rng.random_range(0..OBJECTS.len())].to_string(),
        object_count: rng.random_range(1..=9),
        image_count: rng.random_range(4..=10),
    }
}

/// One sub-task session: rounds until `required` correct answers, each wrong
/// answer forcing an extra round.
fn session<R: Rng>(
    rng: &mut R,
    required: u32,
    error_rate: f64,
    params: fn(&mut R) -> RoundParams,
) -> Vec<RoundResult> {
    let mut rounds: Vec<RoundResult> = Vec::new();
    let mut correct = 0;
    while correct < required {
        let mut p = params(rng);
        while rounds.last().is_some_and(|r| r.params == p) {
            p = params(rng);
        }
        // The last needed answer is always right: sessions end on a success.
        let ok = correct + 1 == required || rng.random::<f64>() >= error_rate;
        correct += u32::from(ok);
        rounds.push(RoundResult {
            round_index: rounds.len() as u32,
            params: p,
            answer_correct: ok,
        });
    }
    rounds
}

/// A plausible, valid measurement as the app would send it.
pub fn generate_payload<R: Rng>(rng: &mut R, required: u32) -> MeasurementPayload {
    let scroll_rounds = session(rng, required, 0.12, scroll_params);
    let swipe_rounds = session(rng, required, 0.1, swipe_params);
    let rounds = (scroll_rounds.len() + swipe_rounds.len()) as u64;
    MeasurementPayload {
        duration_ms: rounds * rng.random_range(14_000..30_000),
        scroll_rounds,
        swipe_rounds,
    }
}
