//! HTTP JSON service: `POST /generate` (plain or server-sent events) and
//! `GET /meta`.
//!
//! The model is loaded once and shared read-only; every request owns its own
//! history and sampler. Generation runs on the blocking pool, bounded by a
//! session limit and a per-request deadline.

pub mod api;

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use affectgen_core::lexicon::{builtin_topic_names, EmotionCategory, Lexicon};
use affectgen_core::loss::{DEFAULT_KNOB, DEFAULT_VARIANCE};
use affectgen_core::steer::{generate_session, StepEvent};
use affectgen_core::{Error as CoreError, LanguageModel};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream;
use serde::Serialize;
use tokio::sync::{mpsc, Semaphore};

pub use api::{
    Bounds, ErrorBody, FieldError, GenerateRequest, GenerateResponse, MetaResponse, WeightOverrides, API_SCHEMA_VERSION,
};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_length: usize,
    pub timeout: Duration,
    pub session_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_length: 200,
            timeout: Duration::from_secs(60),
            session_limit: 4,
        }
    }
}

/// Holds the model once loading has finished.
#[derive(Clone, Default)]
pub struct ModelSlot(Arc<OnceLock<Arc<dyn LanguageModel>>>);

impl ModelSlot {
    pub fn ready(model: Arc<dyn LanguageModel>) -> Self {
        let slot = Self::default();
        slot.set(model);
        slot
    }

    /// Installs the model; later calls are ignored.
    pub fn set(&self, model: Arc<dyn LanguageModel>) {
        let _ = self.0.set(model);
    }

    pub fn get(&self) -> Option<Arc<dyn LanguageModel>> {
        self.0.get().cloned()
    }
}

#[derive(Clone)]
pub struct AppState {
    model: ModelSlot,
    lexicon: Arc<Lexicon>,
    config: ServiceConfig,
    sessions: Arc<Semaphore>,
    counter: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(model: ModelSlot, lexicon: Arc<Lexicon>, config: ServiceConfig) -> Self {
        let sessions = Arc::new(Semaphore::new(config.session_limit.max(1)));
        Self {
            model,
            lexicon,
            config,
            sessions,
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Seed for requests that do not name one.
    fn fresh_seed(&self) -> u64 {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        t ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/generate", post(generate))
        .route("/meta", get(meta))
        .with_state(state)
}

/// Serves `router(state)` on `listener` until the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn error_response(status: StatusCode, errors: Vec<FieldError>) -> Response {
    (status, Json(ErrorBody { errors })).into_response()
}

async fn meta(State(state): State<AppState>) -> Json<MetaResponse> {
    let model = state.model.get();
    Json(MetaResponse {
        schema_version: API_SCHEMA_VERSION,
        ready: model.is_some(),
        model_id: model.map(|m| m.model_id()),
        emotions: EmotionCategory::names().map(String::from).collect(),
        topics: builtin_topic_names().map(String::from).collect(),
        knob: Bounds { min: 0.0, max: 1.0 },
        variance: Bounds { min: 0.005, max: 0.5 },
        max_length: state.config.max_length,
        defaults: api::MetaDefaults {
            knob: DEFAULT_KNOB,
            variance: DEFAULT_VARIANCE,
            length: api::DEFAULT_LENGTH,
        },
    })
}

#[derive(Serialize)]
struct ErrorEvent<'a> {
    message: &'a str,
}

async fn generate(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(model) = state.model.get() else {
        return error_response(
            StatusCode::SERVICE_UNAVAILABLE,
            vec![FieldError::new("model", "model is still loading")],
        );
    };
    let request: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, vec![FieldError::new("body", e.to_string())]),
    };
    let job = match request.validate(
        model.as_ref(),
        &state.lexicon,
        state.config.max_length,
        state.fresh_seed(),
    ) {
        Ok(job) => job,
        Err(errors) => {
            tracing::debug!(count = errors.len(), "rejected request");
            return error_response(StatusCode::BAD_REQUEST, errors);
        }
    };
    tracing::info!(
        length = job.length,
        seed = job.sampler.seed,
        stream = job.stream,
        "generate"
    );

    let deadline = Instant::now() + state.config.timeout;
    let permit = match tokio::time::timeout(state.config.timeout, state.sessions.clone().acquire_owned()).await {
        Ok(Ok(p)) => p,
        _ => {
            return error_response(
                StatusCode::SERVICE_UNAVAILABLE,
                vec![FieldError::new("session", "session limit reached")],
            )
        }
    };
    let lexicon = state.lexicon.clone();

    if !job.stream {
        let result = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            generate_session(
                model.as_ref(),
                &job.prompt,
                job.length,
                &job.config,
                job.sampler,
                0,
                |_| {
                    if Instant::now() > deadline {
                        ControlFlow::Break(())
                    } else {
                        ControlFlow::Continue(())
                    }
                },
            )
            .map(|record| GenerateResponse::from_record(&record, job.emotion, &lexicon))
        })
        .await;
        return match result {
            Ok(Ok(response)) => Json(response).into_response(),
            Ok(Err(CoreError::Cancelled(n))) => {
                tracing::warn!(tokens = n, "generation timed out");
                error_response(
                    StatusCode::GATEWAY_TIMEOUT,
                    vec![FieldError::new("length", "generation exceeded the request timeout")],
                )
            }
            Ok(Err(e)) => error_response(
                StatusCode::INTERNAL_SERVER_ERROR,
                vec![FieldError::new("generation", e.to_string())],
            ),
            Err(e) => error_response(
                StatusCode::INTERNAL_SERVER_ERROR,
                vec![FieldError::new("generation", e.to_string())],
            ),
        };
    }

    let (tx, rx) = mpsc::channel::<Event>(64);
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let result = generate_session(
            model.as_ref(),
            &job.prompt,
            job.length,
            &job.config,
            job.sampler,
            0,
            |e: &StepEvent| {
                let event = Event::default().event("token").json_data(e).expect("event serializes");
                // A closed channel means the client went away.
                if Instant::now() > deadline || tx.blocking_send(event).is_err() {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            },
        );
        let last = match result {
            Ok(record) => Event::default()
                .event("summary")
                .json_data(GenerateResponse::from_record(&record, job.emotion, &lexicon)),
            Err(CoreError::Cancelled(_)) => Event::default().event("error").json_data(ErrorEvent {
                message: "generation exceeded the request timeout",
            }),
            Err(e) => Event::default().event("error").json_data(ErrorEvent {
                message: &e.to_string(),
            }),
        };
        let _ = tx.blocking_send(last.expect("event serializes"));
    });
    let events = stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|e| (Ok::<_, std::convert::Infallible>(e), rx))
    });
    Sse::new(events).keep_alive(KeepAlive::default()).into_response()
}
