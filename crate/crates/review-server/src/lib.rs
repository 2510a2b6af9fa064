//! HTTP API over [`klnx::review`] sessions.
//!
//! Items are addressed 1-based in paths. Callers identify themselves with the
//! `X-Validator-Id` header; until an item is complete, a caller only ever sees
//! its own judgment. Resolvers additionally see both judgments of a disputed
//! item. Errors are JSON objects `{"reason", "message"}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection};
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use klnx::corpus::{Corpus, Label, PairKey};
use klnx::detector::Prediction;
use klnx::experiment::load_experiment;
use klnx::kln::KlnSize;
use klnx::review::{
    create_session, session_report, ItemSource, ItemStatus, Judgment, QuestionContext, Resolution, ReviewError,
    ReviewItem, ReviewSession, SessionEvent, SessionReport, SessionStore,
};
use serde::{Deserialize, Serialize};

pub const VALIDATOR_HEADER: &str = "x-validator-id";

/// Shared server state.
pub struct AppState {
    pub store: SessionStore,
    pub corpus: Corpus,
    /// Relative `experiment_dir` values in create requests resolve here.
    pub experiments_root: PathBuf,
}

/// Error body with a stable `reason`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub reason: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, reason: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: status.as_u16(),
            reason: reason.into(),
            message: message.into(),
        }
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::UnknownSession(_) | ReviewError::UnknownItem(_) => StatusCode::NOT_FOUND,
            ReviewError::DuplicateSession(_)
            | ReviewError::DoubleJudgment(_)
            | ReviewError::NotDisputed(_)
            | ReviewError::IncompleteSession(_) => StatusCode::CONFLICT,
            ReviewError::UnknownValidator(_) => StatusCode::FORBIDDEN,
            ReviewError::Storage { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.reason(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_body", e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_path", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub items: usize,
    pub complete: usize,
    pub disputed: usize,
}

impl SessionSummary {
    fn of(s: &ReviewSession) -> Self {
        let statuses = s.statuses();
        SessionSummary {
            session_id: s.session_id.clone(),
            items: statuses.len(),
            complete: statuses.iter().filter(|&&st| st == ItemStatus::Complete).count(),
            disputed: statuses.iter().filter(|&&st| st == ItemStatus::Disputed).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    /// 1-based position.
    pub n: usize,
    pub record_id: String,
    pub pair_label: String,
    pub size: KlnSize,
    pub status: ItemStatus,
    /// Whether the caller has already judged this item.
    pub judged_by_you: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub validators: Vec<String>,
    pub resolvers: Vec<String>,
    pub items: Vec<ItemRow>,
}

/// An item as one caller may see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub n: usize,
    pub record_id: String,
    pub pair_key: PairKey,
    pub pair_label: String,
    pub size: KlnSize,
    pub status: ItemStatus,
    pub code_a: String,
    pub code_b: String,
    pub explanation_markdown: String,
    pub prediction: Prediction,
    pub ground_truth: Label,
    pub context: QuestionContext,
    /// Judgments visible to the caller, keyed by validator id.
    pub judgments: BTreeMap<String, Judgment>,
    pub resolution: Option<Resolution>,
}

impl ItemView {
    fn of(item: &ReviewItem, n: usize, session: &ReviewSession, caller: Option<&str>) -> Self {
        let status = item.status();
        let resolver = caller.is_some_and(|c| session.resolvers.iter().any(|r| r == c));
        let judgments = item
            .judgments
            .iter()
            .filter(|(v, _)| {
                status == ItemStatus::Complete
                    || (status == ItemStatus::Disputed && resolver)
                    || caller == Some(v.as_str())
            })
            .map(|(v, j)| (v.clone(), j.clone()))
            .collect();
        ItemView {
            n,
            record_id: item.record_id.clone(),
            pair_key: item.pair_key.clone(),
            pair_label: item.pair_label.clone(),
            size: item.size,
            status,
            code_a: item.code_a.clone(),
            code_b: item.code_b.clone(),
            explanation_markdown: item.explanation_markdown.clone(),
            prediction: item.prediction,
            ground_truth: item.ground_truth,
            context: item.context.clone(),
            judgments,
            resolution: (status == ItemStatus::Complete).then(|| item.resolution.clone()).flatten(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub session_id: String,
    /// Directory holding the experiment's `manifest.json`.
    pub experiment_dir: PathBuf,
    pub validators: Vec<String>,
    #[serde(default)]
    pub resolvers: Vec<String>,
    /// Record ids to include; all records when absent.
    #[serde(default)]
    pub records: Option<Vec<String>>,
    /// Problem statements keyed by question id.
    #[serde(default)]
    pub question_texts: HashMap<String, String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(new_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/items/{n}", get(get_item))
        .route("/sessions/{id}/items/{n}/judgments", post(post_judgment))
        .route("/sessions/{id}/items/{n}/resolution", post(post_resolution))
        .route("/sessions/{id}/report", get(get_report))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no_route", "no such endpoint") })
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review API listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn caller(headers: &HeaderMap) -> Option<&str> {
    headers.get(VALIDATOR_HEADER).and_then(|v| v.to_str().ok()).filter(|v| !v.is_empty())
}

/// Converts a 1-based path index.
fn index(n: usize, session: &ReviewSession) -> Result<usize, ApiError> {
    if n == 0 || n > session.items.len() {
        return Err(ReviewError::UnknownItem(n).into());
    }
    Ok(n - 1)
}

fn require_caller<'a>(headers: &'a HeaderMap, claimed: &str) -> Result<&'a str, ApiError> {
    let who = caller(headers).ok_or_else(|| {
        ApiError::new(StatusCode::UNAUTHORIZED, "missing_validator", "the X-Validator-Id header is required")
    })?;
    if who != claimed {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "validator_mismatch",
            format!("header names `{who}` but the body names `{claimed}`"),
        ));
    }
    Ok(who)
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Vec<SessionSummary>> {
    let mut out = Vec::new();
    for id in state.store.ids() {
        out.push(SessionSummary::of(&state.store.get(&id)?));
    }
    Ok(Json(out))
}

async fn get_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<SessionView> {
    let s = state.store.get(&id)?;
    let who = caller(&headers);
    let items = s
        .items
        .iter()
        .enumerate()
        .map(|(i, item)| ItemRow {
            n: i + 1,
            record_id: item.record_id.clone(),
            pair_label: item.pair_label.clone(),
            size: item.size,
            status: item.status(),
            judged_by_you: who.is_some_and(|w| item.judgments.contains_key(w)),
        })
        .collect();
    Ok(Json(SessionView {
        session_id: s.session_id.clone(),
        validators: s.validators.clone(),
        resolvers: s.resolvers.clone(),
        items,
    }))
}

async fn new_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let Json(req) = body?;
    let worker = state.clone();
    let session = tokio::task::spawn_blocking(move || build_session(&worker, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let summary = SessionSummary::of(&session);
    state.store.insert(session)?;
    Ok((StatusCode::CREATED, Json(summary)))
}

fn build_session(state: &AppState, req: CreateSession) -> Result<ReviewSession, ApiError> {
    if req.session_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_session_id", "session_id is empty"));
    }
    if state.store.ids().contains(&req.session_id) {
        return Err(ReviewError::DuplicateSession(req.session_id).into());
    }
    let dir = state.experiments_root.join(&req.experiment_dir);
    let stored = load_experiment(&dir)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "experiment_unreadable", e.to_string()))?;
    let mut records: Vec<_> = stored.records.iter().map(|(_, r)| r).collect();
    if let Some(wanted) = &req.records {
        if let Some(missing) = wanted.iter().find(|w| !records.iter().any(|r| &r.record_id == *w)) {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unknown_record",
                format!("record `{missing}` is not in the experiment"),
            ));
        }
        records = wanted
            .iter()
            .filter_map(|w| records.iter().find(|r| &r.record_id == w).copied())
            .collect();
    }
    let sources = records
        .into_iter()
        .map(|record| {
            let pair = stored
                .pairs
                .iter()
                .find(|p| p.pair.key() == record.pair_key)
                .ok_or_else(|| ReviewError::MissingPrediction(record.pair_key.clone()))?;
            Ok(ItemSource {
                record,
                pair_label: pair.label.clone(),
                prediction: pair.prediction,
            })
        })
        .collect::<Result<Vec<_>, ReviewError>>()?;
    Ok(create_session(req.session_id, &sources, req.validators, req.resolvers, &state.corpus, &req.question_texts)?)
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(String, usize)>, PathRejection>,
    headers: HeaderMap,
) -> ApiResult<ItemView> {
    let Path((id, n)) = path?;
    let s = state.store.get(&id)?;
    let i = index(n, &s)?;
    Ok(Json(ItemView::of(&s.items[i], n, &s, caller(&headers))))
}

async fn post_judgment(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(String, usize)>, PathRejection>,
    headers: HeaderMap,
    body: Result<Json<Judgment>, JsonRejection>,
) -> Result<(StatusCode, Json<ItemView>), ApiError> {
    let Json(judgment) = body?;
    let who = require_caller(&headers, &judgment.validator_id)?.to_string();
    let Path((id, n)) = path?;
    let s = state.store.get(&id)?;
    let i = index(n, &s)?;
    state.store.apply(&id, SessionEvent::Judgment { item: i, judgment })?;
    let s = state.store.get(&id)?;
    Ok((StatusCode::CREATED, Json(ItemView::of(&s.items[i], n, &s, Some(&who)))))
}

async fn post_resolution(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(String, usize)>, PathRejection>,
    headers: HeaderMap,
    body: Result<Json<Resolution>, JsonRejection>,
) -> Result<(StatusCode, Json<ItemView>), ApiError> {
    let Json(resolution) = body?;
    let who = require_caller(&headers, &resolution.resolver_id)?.to_string();
    let Path((id, n)) = path?;
    let s = state.store.get(&id)?;
    let i = index(n, &s)?;
    state.store.apply(&id, SessionEvent::Resolution { item: i, resolution })?;
    let s = state.store.get(&id)?;
    Ok((StatusCode::CREATED, Json(ItemView::of(&s.items[i], n, &s, Some(&who)))))
}

async fn get_report(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionReport> {
    Ok(Json(session_report(&state.store.get(&id)?)?))
}
