#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveTime, Utc};
use chrono_tz::Tz;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dailystudy::clock::{Clock, VirtualClock};
use dailystudy::domain::{local_instant, MeasurementPayload, StudyConfig};
use dailystudy::gateway::{FaultConfig, MockCrowd, MockPush};
use dailystudy::persistence::EventStore;
use dailystudy::service::{EnrollmentRequest, Study};
use dailystudy::sim::{generate_payload, sample_enrollment_request};

pub struct Harness {
    pub clock: Arc<VirtualClock>,
    pub crowd: Arc<MockCrowd>,
    pub push: Arc<MockPush>,
    pub study: Study,
    pub hit: String,
    rng: ChaCha8Rng,
}

pub fn utc(s: &str) -> DateTime<Utc> {
    DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
}

pub fn at_local(tz: Tz, date: NaiveDate, h: u32, m: u32) -> DateTime<Utc> {
    local_instant(tz, date, NaiveTime::from_hms_opt(h, m, 0).unwrap())
}

impl Harness {
    pub fn new(config: StudyConfig, start: DateTime<Utc>) -> Self {
        Self::with_store(EventStore::in_memory(config), start)
    }

    pub fn with_store(store: EventStore, start: DateTime<Utc>) -> Self {
        let clock = Arc::new(VirtualClock::new(start));
        let dyn_clock: Arc<dyn Clock> = clock.clone();
        let crowd = Arc::new(MockCrowd::new(dyn_clock.clone(), FaultConfig::default(), 7));
        let push = Arc::new(MockPush::new(dyn_clock.clone(), FaultConfig::default(), 8));
        let mut study = Study::new(store, crowd.clone(), push.clone(), dyn_clock);
        let hit = study.publish_enrollment_hit().unwrap();
        Self {
            clock,
            crowd,
            push,
            study,
            hit,
            rng: ChaCha8Rng::seed_from_u64(99),
        }
    }

    pub fn request(&mut self, tz: Tz) -> EnrollmentRequest {
        let now = self.clock.now();
        let required = self.study.config().required_correct_rounds;
        sample_enrollment_request(&mut self.rng, tz, now, required)
    }

    pub fn payload(&mut self) -> MeasurementPayload {
        let required = self.study.config().required_correct_rounds;
        generate_payload(&mut self.rng, required)
    }

    /// On-boards `device` at the current clock time and has `worker` enter
    /// the code; returns the code.
    pub fn enroll(&mut self, device: &str, worker: &str, tz: Tz) -> String {
        let req = self.request(tz);
        let code = self.study.issue_code(device, req).unwrap().code;
        let asg = self.crowd.submit_assignment(&self.hit, worker, &code).unwrap();
        self.study.validate_submission(worker, &asg, &code).unwrap();
        code
    }

    pub fn set(&mut self, t: DateTime<Utc>) {
        self.clock.set(t);
    }

    pub fn submit(&mut self, device: &str, t: DateTime<Utc>) -> Result<dailystudy::payment::PayQuote, dailystudy::service::ServiceError> {
        self.set(t);
        let p = self.payload();
        self.study.submit_measurement(device, p, t)
    }
}
