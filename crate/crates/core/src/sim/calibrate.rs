//! Grid search for behavior parameters that reproduce target retention
//! figures.

use serde::{Deserialize, Serialize};

use super::{simulate_study, BehaviorProfile, SimConfig};
use crate::analytics::{retention_summary, AnalyticsError, CompletionMatrix};
use crate::domain::StudyConfig;
use crate::service::ServiceError;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Simulation(#[from] ServiceError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Retention figures to aim for, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub pct_all_days: f64,
    pub pct_over_75: f64,
    /// Share of workers who missed a day and ended on a run of three or more
    /// missed days.
    pub pct_terminal_among_missers: f64,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            pct_all_days: 36.8,
            pct_over_75: 68.4,
            pct_terminal_among_missers: 39.0,
        }
    }
}

/// Candidate values for each searched parameter. The hazard for a streak of
/// `k >= 1` missed days is `min(1, scale * (1 + growth * (k - 1)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub base_daily_completion: Vec<f64>,
    pub notification_responsiveness: Vec<f64>,
    pub hazard_scale: Vec<f64>,
    pub p_abandon_after_first: Vec<f64>,
    pub hazard_growth: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            base_daily_completion: vec![0.86, 0.88, 0.9],
            notification_responsiveness: vec![0.45, 0.5, 0.55],
            hazard_scale: vec![0.15, 0.2, 0.25],
            p_abandon_after_first: vec![0.12, 0.16, 0.2],
            hazard_growth: 0.6,
        }
    }
}

pub fn hazard_curve(scale: f64, growth: f64) -> Vec<f64> {
    let mut h = vec![0.0];
    h.extend((1..=4).map(|k| (scale * (1.0 + growth * f64::from(k - 1))).min(1.0)));
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub profile: BehaviorProfile,
    pub pct_all_days: f64,
    pub pct_over_75: f64,
    pub pct_terminal_among_missers: f64,
    pub loss: f64,
}

/// Mean retention figures of `profile` over `seeds`.
pub fn evaluate(
    sim: &SimConfig,
    study: &StudyConfig,
    profile: &BehaviorProfile,
    seeds: &[u64],
    targets: &Targets,
) -> Result<CalibrationPoint, CalibrationError> {
    let (mut all, mut over, mut term) = (0.0, 0.0, 0.0);
    for &seed in seeds {
        let cfg = SimConfig {
            seed,
            profile: profile.clone(),
            ..sim.clone()
        };
        let out = simulate_study(&cfg, study)?;
        let matrix = CompletionMatrix::from_events(&out.events, study.duration_days);
        let r = retention_summary(&matrix)?;
        all += r.pct_all_days;
        over += r.pct_over_75;
        term += if r.missed_any == 0 {
            0.0
        } else {
            100.0 * r.terminal_run_workers as f64 / r.missed_any as f64
        };
    }
    let n = seeds.len().max(1) as f64;
    let (all, over, term) = (all / n, over / n, term / n);
    let loss = (all - targets.pct_all_days).powi(2)
        + (over - targets.pct_over_75).powi(2)
        + 0.25 * (term - targets.pct_terminal_among_missers).powi(2);
    Ok(CalibrationPoint {
        profile: profile.clone(),
        pct_all_days: all,
        pct_over_75: over,
        pct_terminal_among_missers: term,
        loss,
    })
}

/// Evaluates every grid point and returns them best first.
pub fn calibrate(
    sim: &SimConfig,
    study: &StudyConfig,
    grid: &Grid,
    seeds: &[u64],
    targets: &Targets,
) -> Result<Vec<CalibrationPoint>, CalibrationError> {
    let mut candidates = Vec::new();
    for &base in &grid.base_daily_completion {
        for &resp in &grid.notification_responsiveness {
            for &scale in &grid.hazard_scale {
                for &abandon in &grid.p_abandon_after_first {
                    candidates.push(BehaviorProfile {
                        base_daily_completion: base,
                        notification_responsiveness: resp,
                        hazard: hazard_curve(scale, grid.hazard_growth),
                        p_abandon_after_first: abandon,
                        ..sim.profile.clone()
                    });
                }
            }
        }
    }
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(candidates.len().max(1));
    let chunk = candidates.len().div_ceil(threads).max(1);
    let mut points = std::thread::scope(|scope| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| evaluate(sim, study, p, seeds, targets))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut all = Vec::new();
        for h in handles {
            all.extend(h.join().expect("calibration worker panicked")?);
        }
        Ok::<_, CalibrationError>(all)
    })?;
    points.sort_by(|a, b| a.loss.total_cmp(&b.loss));
    Ok(points)
}
