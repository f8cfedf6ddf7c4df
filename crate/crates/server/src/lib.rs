//! HTTP endpoints for the study app and a background scheduler loop.
//!
//! | method | path                  | body / query                                   | reply            |
//! |--------|-----------------------|------------------------------------------------|------------------|
//! | POST   | `/enroll/start`       | device_id, device_model, timezone, consent, demographics | `{}`   |
//! | POST   | `/enroll/measurement` | device_id, first_measurement                   | code, expires_at |
//! | POST   | `/measurement`        | device_id, scroll_rounds, swipe_rounds, duration_ms | pay quote   |
//! | GET    | `/earnings`           | `?device_id=`                                  | pay quote        |
//! | POST   | `/mock/hit/submit`    | worker_id, answer (mock platform only)         | assignment_id    |
//!
//! The device id doubles as the app's bearer token. Errors come back as
//! `{"error": "..."}` with a matching status code.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};

use dailystudy::clock::Clock;
use dailystudy::domain::{ConsentRecord, Demographics, MeasurementPayload, RoundResult};
use dailystudy::gateway::{CrowdError, MockCrowd};
use dailystudy::payment::PayQuote;
use dailystudy::persistence::PersistError;
use dailystudy::service::{EnrollmentRequest, ServiceError, Study};
use dailystudy::state::CodeState;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("call /enroll/start for device {0} first")]
    NotStarted(String),
    #[error("the mock platform is not enabled")]
    NoMockPlatform,
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Platform(#[from] CrowdError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        use ServiceError as S;
        match self {
            ApiError::NotStarted(_) => StatusCode::CONFLICT,
            ApiError::NoMockPlatform => StatusCode::NOT_FOUND,
            ApiError::Service(e) => match e {
                S::ConsentIncomplete
                | S::InvalidDemographics(_)
                | S::UnsupportedDevice(_)
                | S::InvalidMeasurement(_) => StatusCode::UNPROCESSABLE_ENTITY,
                S::DeviceAlreadyOnboarded(_) | S::DuplicateHit(_) | S::DuplicateDay(_) => StatusCode::CONFLICT,
                S::NotEnrolled(_) => StatusCode::FORBIDDEN,
                S::WindowExpired => StatusCode::GONE,
                S::NoEnrollmentHit => StatusCode::SERVICE_UNAVAILABLE,
                S::Gateway(_) => StatusCode::BAD_GATEWAY,
                S::Persist(PersistError::Validation(_)) => StatusCode::CONFLICT,
                S::Persist(_) => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Platform(e) if e.is_transient() => StatusCode::BAD_GATEWAY,
            ApiError::Platform(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRequest {
    pub device_id: String,
    pub device_model: String,
    pub timezone: Tz,
    pub consent: ConsentRecord,
    pub demographics: Demographics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FirstMeasurement {
    pub device_id: String,
    pub first_measurement: MeasurementPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeReply {
    pub code: String,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementRequest {
    pub device_id: String,
    pub scroll_rounds: Vec<RoundResult>,
    pub swipe_rounds: Vec<RoundResult>,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceQuery {
    pub device_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockSubmit {
    pub worker_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSubmitted {
    pub assignment_id: String,
}

struct Inner {
    study: Mutex<Study>,
    /// On-boarding data waiting for the first measurement.
    started: Mutex<BTreeMap<String, StartRequest>>,
    clock: Arc<dyn Clock>,
    mock: Option<(Arc<MockCrowd>, String)>,
}

/// Shared handle to the running service.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// `mock` is the in-process platform and the enrollment HIT id, when the
    /// service runs against it.
    pub fn new(study: Study, clock: Arc<dyn Clock>, mock: Option<(Arc<MockCrowd>, String)>) -> Self {
        Self {
            inner: Arc::new(Inner {
                study: Mutex::new(study),
                started: Mutex::new(BTreeMap::new()),
                clock,
                mock,
            }),
        }
    }

    /// Runs `f` on the study off the async executor; gateway calls may block.
    pub async fn with_study<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        F: FnOnce(&mut Study, DateTime<Utc>) -> Result<T, ServiceError> + Send + 'static,
        T: Send + 'static,
    {
        let inner = self.inner.clone();
        tokio::task::spawn_blocking(move || {
            let mut study = inner.study.lock().map_err(|_| ApiError::Internal("study lock poisoned".into()))?;
            let now = inner.clock.now();
            f(&mut study, now).map_err(ApiError::from)
        })
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
    }

    /// One scheduler pass at the current clock time.
    pub async fn tick(&self) -> Result<usize, ApiError> {
        self.with_study(|s, now| s.tick(now).map(|sent| sent.len())).await
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/enroll/start", post(enroll_start))
        .route("/enroll/measurement", post(enroll_measurement))
        .route("/measurement", post(measurement))
        .route("/earnings", get(earnings))
        .route("/mock/hit/submit", post(mock_submit))
        .with_state(state)
}

async fn enroll_start(State(app): State<AppState>, Json(req): Json<StartRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    if !req.consent.complete() {
        return Err(ServiceError::ConsentIncomplete.into());
    }
    req.demographics
        .validate()
        .map_err(|e| ServiceError::InvalidDemographics(e.to_string()))?;
    let device = req.device_id.clone();
    let known = app
        .with_study(move |s, _| Ok(s.state().participant(&device).is_some()))
        .await?;
    if known {
        return Err(ServiceError::DeviceAlreadyOnboarded(req.device_id).into());
    }
    app.inner
        .started
        .lock()
        .map_err(|_| ApiError::Internal("lock poisoned".into()))?
        .insert(req.device_id.clone(), req);
    Ok(Json(serde_json::json!({})))
}

async fn enroll_measurement(
    State(app): State<AppState>,
    Json(req): Json<FirstMeasurement>,
) -> Result<Json<CodeReply>, ApiError> {
    let start = app
        .inner
        .started
        .lock()
        .map_err(|_| ApiError::Internal("lock poisoned".into()))?
        .get(&req.device_id)
        .cloned();
    let device = req.device_id.clone();
    let request = match start {
        Some(s) => Some(EnrollmentRequest {
            device_model: s.device_model,
            timezone: s.timezone,
            consent: s.consent,
            demographics: s.demographics,
            first_measurement: req.first_measurement,
        }),
        None => None,
    };
    let issued = app
        .with_study(move |s, _| match request {
            Some(r) => s.issue_code(&device, r).map(Some),
            // A retry after the start data was consumed gets the open code back.
            None => Ok(s
                .state()
                .codes
                .values()
                .find(|c| c.device_id == device && c.state == CodeState::Unused)
                .cloned()),
        })
        .await?
        .ok_or_else(|| ApiError::NotStarted(req.device_id.clone()))?;
    app.inner
        .started
        .lock()
        .map_err(|_| ApiError::Internal("lock poisoned".into()))?
        .remove(&req.device_id);
    Ok(Json(CodeReply {
        code: issued.code,
        expires_at: issued.expires_at,
    }))
}

async fn measurement(State(app): State<AppState>, Json(req): Json<MeasurementRequest>) -> Result<Json<PayQuote>, ApiError> {
    let payload = MeasurementPayload {
        scroll_rounds: req.scroll_rounds,
        swipe_rounds: req.swipe_rounds,
        duration_ms: req.duration_ms,
    };
    let device = req.device_id;
    let quote = app
        .with_study(move |s, now| s.submit_measurement(&device, payload, now))
        .await?;
    Ok(Json(quote))
}

async fn earnings(State(app): State<AppState>, Query(q): Query<DeviceQuery>) -> Result<Json<PayQuote>, ApiError> {
    let quote = app.with_study(move |s, _| s.earnings(&q.device_id)).await?;
    Ok(Json(quote))
}

async fn mock_submit(State(app): State<AppState>, Json(req): Json<MockSubmit>) -> Result<Json<MockSubmitted>, ApiError> {
    let (crowd, hit) = app.inner.mock.clone().ok_or(ApiError::NoMockPlatform)?;
    let assignment_id = crowd.submit_assignment(&hit, &req.worker_id, &req.answer)?;
    Ok(Json(MockSubmitted { assignment_id }))
}

/// Calls [`AppState::tick`] every `every` until the task is dropped.
/// Failures are reported and the loop continues; work left undone is
/// picked up on the next pass.
pub async fn run_scheduler(app: AppState, every: Duration) {
    let mut interval = tokio::time::interval(every);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        if let Err(e) = app.tick().await {
            eprintln!("scheduler: {e}");
        }
    }
}

/// Serves the API on `listener` with the scheduler running alongside until
/// `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: AppState,
    tick_every: Duration,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let scheduler = tokio::spawn(run_scheduler(app.clone(), tick_every));
    let result = axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await;
    scheduler.abort();
    result
}
