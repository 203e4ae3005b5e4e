//! HTTP API over a finished run directory for expert triage of rejected
//! pairs. JSON over HTTP, no authentication; bind it to a trusted interface.

pub mod store;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use loca_core::consistency::Equivalence;
use loca_core::corpus::PairState;
use loca_core::review_loop::{IterationRecord, LoopStatus};
use store::{ExpertAction, ExpertVerdict, PairEntry, RunStore, StoreError};

pub use store::PairStatus;

const PREVIEW_CHARS: usize = 200;
const DEFAULT_LIMIT: usize = 50;
const MAX_LIMIT: usize = 500;

type Clock = Arc<dyn Fn() -> String + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    store: Arc<RwLock<RunStore>>,
    now: Clock,
}

impl AppState {
    pub fn new(store: RunStore) -> Self {
        Self::with_clock(store, Arc::new(|| {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        }))
    }

    /// Uses `now` to stamp submitted verdicts.
    pub fn with_clock(store: RunStore, now: Clock) -> Self {
        Self {
            store: Arc::new(RwLock::new(store)),
            now,
        }
    }
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/pairs", get(list_pairs))
        .route("/pairs/{id}", get(pair_detail))
        .route("/pairs/{id}/verdict", post(submit_verdict))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Opens `run_dir` and builds the full application.
pub fn app(run_dir: &Path, static_dir: Option<PathBuf>) -> Result<Router, StoreError> {
    let store = RunStore::open(run_dir)?;
    Ok(router(AppState::new(store), static_dir.as_deref()))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        match &self {
            StoreError::NotFound(_) => error(StatusCode::NOT_FOUND, self.to_string()),
            StoreError::Conflict { state, .. } => (
                StatusCode::CONFLICT,
                Json(json!({ "error": self.to_string(), "state": state })),
            )
                .into_response(),
            StoreError::Invalid(_) => error(StatusCode::UNPROCESSABLE_ENTITY, self.to_string()),
            _ => {
                tracing::error!("review store failure: {self}");
                error(StatusCode::INTERNAL_SERVER_ERROR, self.to_string())
            }
        }
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn metrics(State(state): State<AppState>) -> Json<serde_json::Value> {
    let store = state.store.read().await;
    Json(json!({
        "run": store.report(),
        "states": store.state_counts(),
        "current": store.current_metrics(),
    }))
}

#[derive(Deserialize)]
struct ListQuery {
    state: Option<String>,
    limit: Option<usize>,
    offset: Option<usize>,
}

#[derive(Serialize)]
struct PairSummary {
    pair_id: String,
    state: PairState,
    question_preview: String,
    rationale: String,
    iterations: u32,
}

fn preview(text: &str) -> String {
    let trimmed = text.trim();
    match trimmed.char_indices().nth(PREVIEW_CHARS) {
        Some((cut, _)) => format!("{}...", &trimmed[..cut]),
        None => trimmed.to_string(),
    }
}

/// Why the pipeline decided the way it did, in one line.
fn rationale(entry: &PairEntry) -> String {
    let Some(d) = &entry.decision else {
        return "no machine decision".into();
    };
    match (d.internal_coherence, &d.external_consistency) {
        (Some(LoopStatus::Failed), _) => format!("internal coherence failed after {} iterations", d.iterations),
        (Some(LoopStatus::Passed), Some(c)) => {
            let method = serde_json::to_value(c.method).ok();
            let method = method.as_ref().and_then(|m| m.as_str()).unwrap_or("unknown");
            match c.verdict {
                Equivalence::Match => format!("passed review and matches the raw answer ({method})"),
                Equivalence::Mismatch => format!("passed review but external consistency: mismatch ({method})"),
                Equivalence::Undecided => format!("passed review but external consistency: undecided ({method})"),
            }
        }
        _ => d.error.clone().unwrap_or_else(|| "not decided".into()),
    }
}

async fn list_pairs(State(state): State<AppState>, Query(q): Query<ListQuery>) -> Response {
    let filter = match q.state.as_deref() {
        None | Some("") => None,
        Some(s) => match s.parse::<PairState>() {
            Ok(state) => Some(state),
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        },
    };
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT).min(MAX_LIMIT);
    let offset = q.offset.unwrap_or(0);
    let store = state.store.read().await;
    let matching: Vec<&PairEntry> = store.list(filter).collect();
    let items: Vec<PairSummary> = matching
        .iter()
        .skip(offset)
        .take(limit)
        .map(|e| PairSummary {
            pair_id: e.pair.id.clone(),
            state: e.state,
            question_preview: preview(&e.pair.question),
            rationale: rationale(e),
            iterations: e.decision.as_ref().map_or(0, |d| d.iterations),
        })
        .collect();
    Json(json!({
        "total": matching.len(),
        "offset": offset,
        "limit": limit,
        "items": items,
    }))
    .into_response()
}

#[derive(Serialize)]
struct Numbered<'a> {
    iteration: u32,
    text: &'a str,
}

async fn pair_detail(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let store = state.store.read().await;
    let Some(entry) = store.get(&id) else {
        return StoreError::NotFound(id).into_response();
    };
    let iterations: Vec<IterationRecord> = match store.iterations(&id) {
        Ok(it) => it,
        Err(e) => return StoreError::Io(e).into_response(),
    };
    let bug_reports: Vec<Numbered> = iterations
        .iter()
        .filter_map(|it| it.bug_report.as_deref().map(|text| Numbered { iteration: it.index, text }))
        .collect();
    // A refinement is the augmenter's answer to the previous iteration's bug report.
    let refinements: Vec<Numbered> = iterations
        .windows(2)
        .filter(|w| w[0].bug_report.is_some())
        .map(|w| Numbered {
            iteration: w[1].index,
            text: &w[1].completion,
        })
        .collect();
    Json(json!({
        "pair_id": entry.pair.id,
        "status": entry.status(),
        "question": entry.pair.question,
        "raw_answer": entry.pair.raw_answer,
        "source": entry.pair.source,
        "corrected_answer": entry.pair.corrected_answer,
        "rationale": rationale(entry),
        "decision": entry.decision,
        "external_consistency": entry.decision.as_ref().and_then(|d| d.external_consistency.as_ref()),
        "iterations": iterations,
        "bug_reports": bug_reports,
        "refinements": refinements,
        "expert_history": store.audit_for(&id),
    }))
    .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictBody {
    #[serde(default)]
    pair_id: Option<String>,
    action: ExpertAction,
    #[serde(default)]
    corrected_answer: Option<String>,
    reviewer: String,
    #[serde(default)]
    note: String,
}

async fn submit_verdict(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let body: VerdictBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid verdict: {e}")),
    };
    if body.pair_id.as_ref().is_some_and(|p| *p != id) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "pair_id in the body does not match the path");
    }
    let verdict = ExpertVerdict {
        pair_id: id,
        action: body.action,
        corrected_answer: body.corrected_answer,
        reviewer: body.reviewer,
        note: body.note,
        submitted_at: (state.now)(),
    };
    let mut store = state.store.write().await;
    if store.get(&verdict.pair_id).is_none() {
        return StoreError::NotFound(verdict.pair_id).into_response();
    }
    if let Err(msg) = verdict.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, msg);
    }
    match store.submit(verdict) {
        Ok(status) => Json(status).into_response(),
        Err(e) => e.into_response(),
    }
}
