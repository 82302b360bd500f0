//! JSON API over the engine.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use psych_core::behavior::TrailEvent;
use psych_core::geometry::CircleSelection;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::engine::{AnswerOutcome, Engine, NextPayload, ServiceError};
use crate::review::ReviewResult;
use crate::session::{AnswerInput, Page, Phase, PracticeOutcome, SessionError};
use crate::survey::SurveyStatus;

pub type Shared = Arc<Mutex<Engine>>;

pub fn router(engine: Shared, images: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/consent", post(acknowledge))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/practice", post(practice))
        .route("/sessions/{id}/answers", post(answers))
        .route("/sessions/{id}/score", get(score))
        .route("/admin/review/{session_id}", post(review))
        .route("/admin/requeue/{survey_id}", post(requeue))
        .with_state(engine);
    match images {
        Some(dir) => api.nest_service("/images", ServeDir::new(dir)),
        None => api,
    }
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        Self(e.into())
    }
}

impl ApiError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        use ServiceError as S;
        match &self.0 {
            S::Session(e) => match e {
                SessionError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
                SessionError::WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
                SessionError::PracticeSize(_) => (StatusCode::UNPROCESSABLE_ENTITY, "practice_size"),
                SessionError::OutOfOrderAnswer { .. } => (StatusCode::CONFLICT, "out_of_order_answer"),
                SessionError::OutOfOrderBatch { .. } => (StatusCode::CONFLICT, "out_of_order_batch"),
                SessionError::WrongTime { .. } => (StatusCode::CONFLICT, "wrong_time"),
                SessionError::InvalidAnswer(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_answer"),
            },
            S::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            S::UnknownSurvey(_) => (StatusCode::NOT_FOUND, "unknown_survey"),
            S::NoSurveyAvailable => (StatusCode::SERVICE_UNAVAILABLE, "no_survey_available"),
            S::RepeatWorker(_) => (StatusCode::CONFLICT, "repeat_worker"),
            S::WrongStatus { .. } => (StatusCode::CONFLICT, "wrong_status"),
            S::SessionNotDone(_) => (StatusCode::CONFLICT, "session_not_done"),
            S::UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image"),
            S::BadPractice(_) | S::Store(_) | S::Assembly(_) | S::Replay { .. } => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        if status.is_server_error() {
            tracing::error!("{}", self.0);
        }
        (status, Json(json!({ "error": code, "message": self.0.to_string() }))).into_response()
    }
}

fn lock(engine: &Shared) -> MutexGuard<'_, Engine> {
    engine.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub worker_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub survey_id: String,
    pub phase: Phase,
}

async fn create_session(
    State(engine): State<Shared>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let mut engine = lock(&engine);
    let s = engine.create_session(&body.worker_id)?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: s.session_id.clone(),
            survey_id: s.survey_id.clone(),
            phase: s.phase,
        }),
    ))
}

#[derive(Debug, Default, Deserialize)]
pub struct Acknowledge {
    /// Defaults to the consent page.
    pub page: Option<Page>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhaseReply {
    pub phase: Phase,
}

async fn acknowledge(
    State(engine): State<Shared>,
    Path(id): Path<String>,
    body: Option<Json<Acknowledge>>,
) -> Result<Json<PhaseReply>, ApiError> {
    let page = body.and_then(|Json(b)| b.page).unwrap_or(Page::Consent);
    let phase = lock(&engine).acknowledge(&id, page)?;
    Ok(Json(PhaseReply { phase }))
}

async fn next(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Json<NextPayload>, ApiError> {
    Ok(Json(lock(&engine).next(&id)?))
}

#[derive(Debug, Deserialize)]
pub struct PracticeBody {
    pub selections: Vec<CircleSelection>,
}

async fn practice(
    State(engine): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<PracticeBody>,
) -> Result<Json<PracticeOutcome>, ApiError> {
    Ok(Json(lock(&engine).submit_practice(&id, &body.selections)?))
}

/// Either a trail flush (no selection, no response time) or the final answer.
#[derive(Debug, Deserialize)]
pub struct AnswerBody {
    pub question_idx: usize,
    #[serde(default)]
    pub batch: Option<u32>,
    #[serde(default)]
    pub events: Vec<TrailEvent>,
    #[serde(default)]
    pub final_selection: Option<CircleSelection>,
    #[serde(default)]
    pub response_time_ms: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerReply {
    Flushed { question_idx: usize, applied: bool },
    Answered(AnswerOutcome),
}

async fn answers(
    State(engine): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<AnswerBody>,
) -> Result<Json<AnswerReply>, ApiError> {
    let mut engine = lock(&engine);
    match (body.final_selection, body.response_time_ms) {
        (None, None) => {
            let batch = body.batch.ok_or_else(|| {
                SessionError::InvalidAnswer("a trail flush needs a batch number".into())
            })?;
            let applied = engine.flush_trail(&id, body.question_idx, batch, &body.events)?;
            Ok(Json(AnswerReply::Flushed {
                question_idx: body.question_idx,
                applied,
            }))
        }
        (Some(final_selection), Some(response_time_ms)) => {
            if let Some(batch) = body.batch {
                engine.flush_trail(&id, body.question_idx, batch, &[])?;
            }
            let input = AnswerInput {
                question_idx: body.question_idx,
                events: body.events,
                final_selection,
                response_time_ms,
            };
            Ok(Json(AnswerReply::Answered(engine.submit_answer(&id, &input)?)))
        }
        _ => Err(SessionError::InvalidAnswer(
            "final_selection and response_time_ms go together".into(),
        )
        .into()),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreReply {
    pub score: usize,
    pub answered: usize,
}

async fn score(State(engine): State<Shared>, Path(id): Path<String>) -> Result<Json<ScoreReply>, ApiError> {
    let engine = lock(&engine);
    let score = engine.midpoint_score(&id)?;
    Ok(Json(ScoreReply {
        score,
        answered: crate::session::MIDPOINT,
    }))
}

async fn review(
    State(engine): State<Shared>,
    Path(session_id): Path<String>,
) -> Result<Json<ReviewResult>, ApiError> {
    Ok(Json(lock(&engine).review(&session_id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SurveyReply {
    pub survey_id: String,
    pub status: SurveyStatus,
}

async fn requeue(
    State(engine): State<Shared>,
    Path(survey_id): Path<String>,
) -> Result<Json<SurveyReply>, ApiError> {
    let mut engine = lock(&engine);
    let s = engine.requeue(&survey_id)?;
    Ok(Json(SurveyReply {
        survey_id: s.survey_id.clone(),
        status: s.status,
    }))
}
