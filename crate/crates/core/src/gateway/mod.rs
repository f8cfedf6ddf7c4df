//! Narrow interfaces to the two external services, the crowd-work platform
//! and the push-notification service, plus in-process mocks of both.

mod crowd;
mod push;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crowd::{
    Assignment, AssignmentStatus, CrowdError, CrowdGateway, HitSpec, LedgerEntry, LedgerKind,
    MockCrowd, Receipt, write_ledger_csv,
};
pub use push::{MockPush, PushError, PushGateway, PushRecord};

/// Where an injected fault lands relative to the operation's side effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// The call fails and nothing happens.
    BeforeEffect,
    /// The effect is applied but the caller still sees an error.
    AfterEffect,
    /// Either of the above with equal probability.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub failure_rate: f64,
    pub mode: FaultMode,
    /// Wall-clock delay added to every call.
    pub latency_ms: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            failure_rate: 0.0,
            mode: FaultMode::BeforeEffect,
            latency_ms: 0,
        }
    }
}

impl FaultConfig {
    pub fn failing(rate: f64, mode: FaultMode) -> Self {
        Self {
            failure_rate: rate,
            mode,
            latency_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Fault {
    None,
    Before,
    After,
}

pub(crate) fn draw_fault(cfg: &FaultConfig, rng: &mut ChaCha8Rng) -> Fault {
    if cfg.latency_ms > 0 {
        std::thread::sleep(std::time::Duration::from_millis(cfg.latency_ms));
    }
    if cfg.failure_rate <= 0.0 || rng.random::<f64>() >= cfg.failure_rate {
        return Fault::None;
    }
    match cfg.mode {
        FaultMode::BeforeEffect => Fault::Before,
        FaultMode::AfterEffect => Fault::After,
        FaultMode::Mixed => {
            if rng.random::<bool>() {
                Fault::Before
            } else {
                Fault::After
            }
        }
    }
}
