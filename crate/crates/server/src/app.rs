//! Router, shared state and request handlers.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use contextcrop_core::assessment::{
    build_report, rubric, ImageLinks, MetricReport, RatingRecord, RubricGrade, Score, TestMethod,
};
use contextcrop_core::context::{ContextEntry, ContextWindow};
use contextcrop_core::dialogue::{ImageItem, Role, Turn};
use contextcrop_core::grounding::Detection;
use contextcrop_core::keywords::KeywordList;
use contextcrop_core::pipeline::{read_provenance, sha256_hex, ProvenanceRecord, Refiner, DEFAULT_CROP_CUTOFF};
use contextcrop_core::roi::{image_dimensions, image_extension, RefinementResult};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::blinding::assignment;
use crate::store::{RatingStore, StoreError};
use crate::tasks::{TaskFile, TaskFileError};

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Tasks(#[from] TaskFileError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("provenance {path}: {message}")]
    Provenance { path: String, message: String },
    #[error("ratings store does not match the task file: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub seed: u64,
    pub ratings_store: PathBuf,
    pub tasks: PathBuf,
    /// Enables the cropped-image column of the report.
    pub provenance: Option<PathBuf>,
    pub max_upload_bytes: usize,
    pub max_in_flight: usize,
}

struct Ratings {
    store: RatingStore,
    /// (evaluator, task position) pairs already rated.
    rated: HashSet<(u32, usize)>,
}

#[derive(Clone)]
pub struct AppState {
    seed: u64,
    tasks: Arc<TaskFile>,
    ratings: Arc<Mutex<Ratings>>,
    provenance: Option<Arc<Vec<ProvenanceRecord>>>,
    refiner: Option<Arc<Refiner>>,
    pool: Arc<Semaphore>,
    max_upload_bytes: usize,
}

impl AppState {
    /// Loads the task file, the existing ratings and, if given, provenance.
    pub fn load(opts: &ServeOptions, refiner: Option<Refiner>) -> Result<Self, ServeError> {
        let tasks = TaskFile::load(&opts.tasks)?;
        let store = RatingStore::open(&opts.ratings_store)?;
        let provenance = match &opts.provenance {
            Some(p) => {
                let err = |message: String| ServeError::Provenance {
                    path: p.display().to_string(),
                    message,
                };
                let f = std::fs::File::open(p).map_err(|e| err(e.to_string()))?;
                Some(read_provenance(std::io::BufReader::new(f)).map_err(|e| err(e.to_string()))?)
            }
            None => None,
        };
        Self::new(
            opts.seed,
            tasks,
            store,
            provenance,
            refiner,
            opts.max_in_flight,
            opts.max_upload_bytes,
        )
    }

    pub fn new(
        seed: u64,
        tasks: TaskFile,
        store: RatingStore,
        provenance: Option<Vec<ProvenanceRecord>>,
        refiner: Option<Refiner>,
        max_in_flight: usize,
        max_upload_bytes: usize,
    ) -> Result<Self, ServeError> {
        let by_response = tasks.index_by_response();
        let evaluators: HashSet<u32> = tasks.evaluators.iter().map(|e| e.evaluator).collect();
        let mut rated = HashSet::new();
        for r in store.records() {
            let Some(&idx) = by_response.get(&(r.session.clone(), r.response_index)) else {
                return Err(ServeError::Mismatch(format!(
                    "rating for session {} response {} has no task",
                    r.session, r.response_index
                )));
            };
            if !evaluators.contains(&r.evaluator) {
                return Err(ServeError::Mismatch(format!(
                    "evaluator {} is not registered",
                    r.evaluator
                )));
            }
            if !rated.insert((r.evaluator, idx)) {
                return Err(ServeError::Mismatch(format!(
                    "evaluator {} rated task {} twice",
                    r.evaluator, tasks.tasks[idx].task_id
                )));
            }
        }
        Ok(AppState {
            seed,
            tasks: Arc::new(tasks),
            ratings: Arc::new(Mutex::new(Ratings { store, rated })),
            provenance: provenance.map(Arc::new),
            refiner: refiner.map(Arc::new),
            pool: Arc::new(Semaphore::new(max_in_flight.max(1))),
            max_upload_bytes,
        })
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/ratings", post(submit_rating))
        .route("/api/reports/dmos", get(report_dmos))
        .route("/api/refine", post(refine).layer(DefaultBodyLimit::max(limit)))
        .route("/api/rubric", get(get_rubric))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::debug!("listening on http://{addr}");
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{}", self.message);
        }
        let body = Json(serde_json::json!({ "error": self.message }));
        if self.status == StatusCode::UNAUTHORIZED {
            (self.status, [(header::WWW_AUTHENTICATE, "Bearer")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

fn evaluator_of(state: &AppState, headers: &HeaderMap) -> Result<u32, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "missing bearer token"))?;
    state
        .tasks
        .evaluator_for(token)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unknown evaluator token"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responses {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
}

/// What the console receives. Carries no hint of which slot is which condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTask {
    Task {
        task_id: String,
        excerpt: Vec<Turn>,
        responses: Responses,
        rubric: Vec<RubricGrade>,
        progress: Progress,
    },
    Exhausted {
        progress: Progress,
    },
}

async fn next_task(State(state): State<AppState>, headers: HeaderMap) -> Result<Json<NextTask>, ApiError> {
    let evaluator = evaluator_of(&state, &headers)?;
    let ratings = state.ratings.lock().expect("ratings lock");
    let total = state.tasks.tasks.len();
    let rated = (0..total).filter(|i| ratings.rated.contains(&(evaluator, *i))).count();
    let progress = Progress { rated, total };
    let next = (0..total).find(|i| !ratings.rated.contains(&(evaluator, *i)));
    Ok(Json(match next {
        None => NextTask::Exhausted { progress },
        Some(i) => {
            let t = &state.tasks.tasks[i];
            let (a, b) = assignment(state.seed, &t.task_id).randomize(t.treatment.clone(), t.reference.clone());
            NextTask::Task {
                task_id: t.task_id.clone(),
                excerpt: t.excerpt.clone(),
                responses: Responses { a, b },
                rubric: rubric(),
                progress,
            }
        }
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub task_id: String,
    /// Optional; when present it must match the bearer token.
    #[serde(default)]
    pub evaluator: Option<u32>,
    pub score_a: i64,
    pub score_b: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingAck {
    pub task_id: String,
    pub progress: Progress,
}

async fn submit_rating(
    State(state): State<AppState>,
    headers: HeaderMap,
    Json(sub): Json<RatingSubmission>,
) -> Result<(StatusCode, Json<RatingAck>), ApiError> {
    let evaluator = evaluator_of(&state, &headers)?;
    if sub.evaluator.is_some_and(|e| e != evaluator) {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "evaluator does not match the token",
        ));
    }
    let score = |v: i64, slot: &str| {
        Score::new(v).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("score_{slot}: {e}")))
    };
    let (score_a, score_b) = (score(sub.score_a, "a")?, score(sub.score_b, "b")?);
    let idx = state
        .tasks
        .tasks
        .iter()
        .position(|t| t.task_id == sub.task_id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown task `{}`", sub.task_id)))?;
    let task = &state.tasks.tasks[idx];
    let (score_treatment, score_reference) = assignment(state.seed, &task.task_id).derandomize(score_a, score_b);
    let record = RatingRecord {
        evaluator,
        session: task.session_id.clone(),
        response_index: task.response_index,
        images: ImageLinks(task.image_ids.clone()),
        score_treatment,
        score_reference,
    };

    let state2 = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut ratings = state2.ratings.lock().expect("ratings lock");
        if ratings.rated.contains(&(evaluator, idx)) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "task already rated by this evaluator",
            ));
        }
        ratings
            .store
            .append(record)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        ratings.rated.insert((evaluator, idx));
        let total = state2.tasks.tasks.len();
        let rated = (0..total).filter(|i| ratings.rated.contains(&(evaluator, *i))).count();
        Ok((
            StatusCode::CREATED,
            Json(RatingAck {
                task_id: state2.tasks.tasks[idx].task_id.clone(),
                progress: Progress { rated, total },
            }),
        ))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingTask {
    pub evaluator: u32,
    pub task_id: String,
    pub session: String,
    pub response_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReportResponse {
    Complete { report: Box<MetricReport> },
    Incomplete { missing: Vec<MissingTask> },
    Empty { error: String },
}

#[derive(Debug, Clone, Deserialize)]
pub struct ReportQuery {
    #[serde(default)]
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub test: Option<String>,
}

async fn report_dmos(
    State(state): State<AppState>,
    Query(q): Query<ReportQuery>,
) -> Result<(StatusCode, Json<ReportResponse>), ApiError> {
    let cutoff = q.cutoff.unwrap_or(DEFAULT_CROP_CUTOFF);
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "cutoff must lie in (0, 1]",
        ));
    }
    let method = match q.test.as_deref() {
        None => TestMethod::default(),
        Some(t) => t
            .parse::<TestMethod>()
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?,
    };
    let ratings = state.ratings.lock().expect("ratings lock");
    if ratings.store.records().is_empty() {
        return Ok((
            StatusCode::CONFLICT,
            Json(ReportResponse::Empty {
                error: "no ratings have been submitted".into(),
            }),
        ));
    }
    // tasks somebody rated must be rated by every registered evaluator
    let included: HashSet<usize> = ratings.rated.iter().map(|&(_, i)| i).collect();
    let mut missing = Vec::new();
    for (i, t) in state
        .tasks
        .tasks
        .iter()
        .enumerate()
        .filter(|(i, _)| included.contains(i))
    {
        for e in &state.tasks.evaluators {
            if !ratings.rated.contains(&(e.evaluator, i)) {
                missing.push(MissingTask {
                    evaluator: e.evaluator,
                    task_id: t.task_id.clone(),
                    session: t.session_id.clone(),
                    response_index: t.response_index,
                });
            }
        }
    }
    if !missing.is_empty() {
        return Ok((StatusCode::OK, Json(ReportResponse::Incomplete { missing })));
    }
    let set = ratings
        .store
        .rating_set()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let report = build_report(&set, state.provenance.as_deref().map(Vec::as_slice), cutoff, method)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok((
        StatusCode::OK,
        Json(ReportResponse::Complete {
            report: Box::new(report),
        }),
    ))
}

async fn get_rubric() -> Json<Vec<RubricGrade>> {
    Json(rubric())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResponse {
    pub result: RefinementResult,
    pub context_turns_used: usize,
    pub keywords: KeywordList,
    pub detections: Vec<Detection>,
    /// `png` or `jpg`.
    pub format: String,
    /// The output image, base64. Identical to the upload when nothing was cropped.
    pub image: String,
}

/// One supplied context text. Plain-text parts become patient entries, each its own turn.
fn context_entry(content_type: Option<&str>, body: &str) -> Result<ContextEntry, ApiError> {
    if content_type.is_some_and(|c| c.starts_with("application/json")) {
        serde_json::from_str(body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("context entry: {e}")))
    } else {
        Ok(ContextEntry {
            role: Role::Patient,
            text: body.to_string(),
            turn: None,
        })
    }
}

async fn refine(State(state): State<AppState>, mut multipart: Multipart) -> Result<Json<RefineResponse>, ApiError> {
    let refiner = state
        .refiner
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model backends configured"))?;
    let mut bytes = None;
    let mut image_id = None;
    let mut entries = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let content_type = field.content_type().map(str::to_string);
        match name.as_str() {
            "image" => {
                bytes = Some(
                    field
                        .bytes()
                        .await
                        .map_err(|e| ApiError::new(e.status(), e.body_text()))?,
                );
            }
            "image_id" => {
                image_id = Some(
                    field
                        .text()
                        .await
                        .map_err(|e| ApiError::new(e.status(), e.body_text()))?,
                );
            }
            "context" => {
                let text = field
                    .text()
                    .await
                    .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
                entries.push(context_entry(content_type.as_deref(), &text)?);
            }
            other => {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("unexpected form field `{other}`"),
                ))
            }
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "missing `image` part"))?;
    let (width, height) = image_dimensions(&bytes)
        .ok_or_else(|| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "image must be PNG or JPEG"))?;
    let image_id = image_id
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| sha256_hex(&bytes)[..16].to_string());

    let _permit = state
        .pool
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    let response = tokio::task::spawn_blocking(move || {
        let ext = image_extension(&bytes).unwrap_or("bin");
        let item = ImageItem::new(image_id.clone(), format!("{image_id}.{ext}"), width, height);
        let window = ContextWindow::trimmed(image_id, entries, refiner.config().context_turns);
        let outcome = refiner.refine_window(&window, &item, &bytes);
        RefineResponse {
            format: image_extension(&outcome.refined.bytes).unwrap_or(ext).to_string(),
            image: base64::engine::general_purpose::STANDARD.encode(&outcome.refined.bytes),
            result: outcome.refined.result,
            context_turns_used: outcome.context_turns_used,
            keywords: outcome.keywords,
            detections: outcome.detections,
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(response))
}
