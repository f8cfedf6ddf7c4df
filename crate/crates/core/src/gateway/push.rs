use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{draw_fault, Fault, FaultConfig};
use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PushError {
    #[error("push service unavailable: {0}")]
    Unavailable(String),
    #[error("device {0} is not registered")]
    Unregistered(String),
}

pub trait PushGateway: Send + Sync {
    fn send(&self, device_id: &str, message: &str) -> Result<(), PushError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PushRecord {
    pub device_id: String,
    pub message: String,
    pub at: DateTime<Utc>,
}

struct Inner {
    sent: Vec<PushRecord>,
    uninstalled: BTreeSet<String>,
    faults: FaultConfig,
    rng: ChaCha8Rng,
}

/// Records every delivered push with its timestamp.
pub struct MockPush {
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl MockPush {
    pub fn new(clock: Arc<dyn Clock>, faults: FaultConfig, seed: u64) -> Self {
        Self {
            clock,
            inner: Mutex::new(Inner {
                sent: Vec::new(),
                uninstalled: BTreeSet::new(),
                faults,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        }
    }

    pub fn set_faults(&self, faults: FaultConfig) {
        self.inner.lock().expect("push lock").faults = faults;
    }

    /// Deliveries to this device fail from now on.
    pub fn uninstall(&self, device_id: &str) {
        self.inner
            .lock()
            .expect("push lock")
            .uninstalled
            .insert(device_id.to_string());
    }

    pub fn sent(&self) -> Vec<PushRecord> {
        self.inner.lock().expect("push lock").sent.clone()
    }
}

impl PushGateway for MockPush {
    fn send(&self, device_id: &str, message: &str) -> Result<(), PushError> {
        let now = self.clock.now();
        let mut inner = self.inner.lock().expect("push lock");
        let inner = &mut *inner;
        if inner.uninstalled.contains(device_id) {
            return Err(PushError::Unregistered(device_id.to_string()));
        }
        match draw_fault(&inner.faults, &mut inner.rng) {
            Fault::Before => return Err(PushError::Unavailable("injected failure".into())),
            Fault::After | Fault::None => {}
        }
        inner.sent.push(PushRecord {
            device_id: device_id.to_string(),
            message: message.to_string(),
            at: now,
        });
        Ok(())
    }
}
