//! The running study: enrollment, daily measurements and reminders on top of
//! the event store and the two gateways.
//!
//! Every state change goes through the event store first. Gateway calls come
//! after the decision is logged, and anything that fails is retried from the
//! logged state by [`Study::tick`], so a retry can never produce a second
//! decision or a second payment.

mod enrollment;
mod pipeline;
mod scheduler;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, NaiveTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clock::Clock;
use crate::domain::{
    local_date, local_instant, DeviceId, DomainError, EventBody, SchemeId, StudyConfig, WorkerId,
};
use crate::gateway::{CrowdError, CrowdGateway, PushGateway};
use crate::persistence::{EventStore, PersistError};
use crate::state::{CodeState, StudyState};

pub use enrollment::{EnrollmentRequest, SchemePolicy, CODE_ALPHABET, CODE_LEN};
pub use pipeline::{check_payload, validate_rounds};
pub use scheduler::Dispatched;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("every consent condition must be accepted")]
    ConsentIncomplete,
    #[error("invalid demographics: {0}")]
    InvalidDemographics(String),
    #[error("device model {0} is not supported")]
    UnsupportedDevice(String),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("device {0} already went through on-boarding")]
    DeviceAlreadyOnboarded(DeviceId),
    #[error("an enrollment HIT already exists for this study: {0}")]
    DuplicateHit(String),
    #[error("no enrollment HIT has been published")]
    NoEnrollmentHit,
    #[error("device {0} is not enrolled")]
    NotEnrolled(DeviceId),
    #[error("a measurement for study day {0} was already recorded")]
    DuplicateDay(u32),
    #[error("the study window for this participant has closed")]
    WindowExpired,
    #[error("crowd platform: {0}")]
    Gateway(#[from] CrowdError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

impl From<DomainError> for ServiceError {
    fn from(e: DomainError) -> Self {
        ServiceError::Persist(PersistError::Validation(e))
    }
}

/// Something worth keeping that is not a state change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub at: DateTime<Utc>,
    pub device_id: DeviceId,
    pub note: String,
}

/// Timed work the service owes. Variant order breaks ties at equal instants.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Due {
    ExpireCode(String),
    Rollover(DeviceId),
    Notify(u64),
}

pub struct Study {
    store: EventStore,
    crowd: Arc<dyn CrowdGateway>,
    push: Arc<dyn PushGateway>,
    clock: Arc<dyn Clock>,
    policy: SchemePolicy,
    code_rng: ChaCha8Rng,
    hit_id: Option<String>,
    agenda: BTreeSet<(DateTime<Utc>, Due)>,
    /// Failed push attempts per notification id.
    push_failures: BTreeMap<u64, u32>,
    /// Bonus-earning measurements not yet confirmed by the platform.
    unpaid: BTreeSet<(DeviceId, u32)>,
    /// Set when a gateway call failed and should be retried soon.
    retry_pending: bool,
    last_tick: Option<DateTime<Utc>>,
    audit: Vec<AuditRecord>,
}

impl Study {
    /// Wraps a store (fresh or replayed) and rebuilds the in-memory agenda
    /// from its state.
    pub fn new(
        store: EventStore,
        crowd: Arc<dyn CrowdGateway>,
        push: Arc<dyn PushGateway>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let seed = store.config().seed ^ store.head().wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut study = Self {
            store,
            crowd,
            push,
            clock,
            policy: SchemePolicy::RoundRobin,
            code_rng: ChaCha8Rng::seed_from_u64(seed),
            hit_id: None,
            agenda: BTreeSet::new(),
            push_failures: BTreeMap::new(),
            unpaid: BTreeSet::new(),
            retry_pending: false,
            last_tick: None,
            audit: Vec::new(),
        };
        study.rebuild_agenda();
        study
    }

    pub fn with_policy(mut self, policy: SchemePolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn config(&self) -> &StudyConfig {
        self.store.config()
    }

    pub fn state(&self) -> &StudyState {
        self.store.state()
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn into_store(self) -> EventStore {
        self.store
    }

    pub fn audit(&self) -> &[AuditRecord] {
        &self.audit
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn rebuild_agenda(&mut self) {
        let state = self.store.state();
        let mut agenda = BTreeSet::new();
        for n in state.pending_notifications() {
            agenda.insert((n.fire_at, Due::Notify(n.id)));
        }
        for c in state.codes.values() {
            if c.state == CodeState::Unused {
                agenda.insert((c.expires_at, Due::ExpireCode(c.code.clone())));
            }
        }
        let anchor = state.last_at.unwrap_or_else(|| self.clock.now());
        for p in state.participants.values() {
            if !p.state.is_live() {
                continue;
            }
            // Re-run the most recent rollover; its effects are idempotent.
            let start = local_instant(p.timezone, local_date(p.timezone, anchor), NaiveTime::MIN);
            let at = if p.enrolled_at.is_some_and(|e| start <= e) {
                crate::domain::next_local_midnight(p.timezone, start)
            } else {
                start
            };
            agenda.insert((at, Due::Rollover(p.device_id.clone())));
        }
        self.unpaid = state
            .unpaid_bonuses()
            .into_iter()
            .map(|(d, day, _)| (d, day))
            .collect();
        self.retry_pending = !self.unpaid.is_empty();
        self.agenda = agenda;
    }

    /// Appends an event stamped no earlier than the last one.
    fn append(
        &mut self,
        at: DateTime<Utc>,
        worker_id: Option<WorkerId>,
        body: EventBody,
    ) -> Result<u64, ServiceError> {
        let at = self.store.state().last_at.map_or(at, |last| at.max(last));
        Ok(self.store.append(at, worker_id, body)?)
    }

    fn worker_of(&self, device_id: &str) -> Option<WorkerId> {
        self.state()
            .participant(device_id)
            .and_then(|p| p.worker_id.clone())
    }

    /// Earliest instant at which [`Study::tick`] has work to do.
    pub fn next_due(&self) -> Option<DateTime<Utc>> {
        let agenda = self.agenda.first().map(|(t, _)| *t);
        let retry = if self.retry_pending || !self.unpaid.is_empty() {
            self.last_tick.map(|t| t + chrono::Duration::minutes(1))
        } else {
            None
        };
        match (agenda, retry) {
            (Some(a), Some(r)) => Some(a.min(r)),
            (a, r) => a.or(r),
        }
    }

    /// Number of participants assigned to each scheme so far.
    pub fn scheme_counts(&self) -> BTreeMap<SchemeId, usize> {
        let mut out = BTreeMap::new();
        for p in self.state().participants.values() {
            if let Some(s) = p.scheme_id {
                *out.entry(s).or_insert(0) += 1;
            }
        }
        out
    }
}
