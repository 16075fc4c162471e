//! Local JSON API for human review of pipeline candidates.

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use flawfic_core::dataset::{
    read_tasks, read_votes, resolve_annotations, AnnotationTask, AnnotationVerdict, Resolution, Vote, VoteRecord,
};
use flawfic_core::error::DatasetError;

const INDEX_HTML: &str = include_str!("../static/index.html");

/// Tasks plus the append-only vote log that backs them.
pub struct Session {
    tasks: Vec<AnnotationTask>,
    index: HashMap<String, usize>,
    log: File,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub tasks: usize,
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub votes: usize,
}

#[derive(Debug)]
pub enum VoteError {
    UnknownTask,
    AlreadyVoted,
    Resolved,
    Io(std::io::Error),
}

impl Session {
    /// Load tasks and replay every vote already in the log.
    pub fn open(tasks_path: &Path, log_path: &Path) -> Result<Self, DatasetError> {
        let tasks = read_tasks(tasks_path)?;
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        let mut session =
            Session { tasks, index, log: std::fs::OpenOptions::new().create(true).append(true).open(log_path)? };
        for record in read_votes(log_path)? {
            let i =
                *session.index.get(&record.task_id).ok_or_else(|| DatasetError::UnknownTask(record.task_id.clone()))?;
            session.tasks[i].add_vote(record.vote)?;
        }
        Ok(session)
    }

    pub fn tasks(&self) -> &[AnnotationTask] {
        &self.tasks
    }

    fn resolution(task: &AnnotationTask) -> Resolution {
        // Votes enter only through `vote`, which rejects repeats.
        resolve_annotations(task).unwrap_or(Resolution::Pending)
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress { tasks: self.tasks.len(), ..Progress::default() };
        for t in &self.tasks {
            p.votes += t.votes.len();
            match Self::resolution(t) {
                Resolution::Pending => p.pending += 1,
                Resolution::Accepted => p.accepted += 1,
                Resolution::Rejected => p.rejected += 1,
            }
        }
        p
    }

    /// First unresolved task this annotator has not voted on.
    pub fn next_for(&self, annotator: &str) -> Option<&AnnotationTask> {
        self.tasks.iter().find(|t| !t.has_voted(annotator) && Self::resolution(t) == Resolution::Pending)
    }

    /// Persist the vote, then apply it.
    pub fn vote(
        &mut self,
        task_id: &str,
        annotator: &str,
        verdict: AnnotationVerdict,
        timestamp: u64,
    ) -> Result<Resolution, VoteError> {
        let i = *self.index.get(task_id).ok_or(VoteError::UnknownTask)?;
        let task = &self.tasks[i];
        if task.has_voted(annotator) {
            return Err(VoteError::AlreadyVoted);
        }
        if Self::resolution(task) != Resolution::Pending {
            return Err(VoteError::Resolved);
        }
        let vote = Vote { annotator_id: annotator.to_string(), verdict, timestamp };
        let mut line = serde_json::to_string(&VoteRecord { task_id: task_id.to_string(), vote: vote.clone() })
            .expect("vote records serialize");
        line.push('\n');
        self.log.write_all(line.as_bytes()).and_then(|_| self.log.sync_data()).map_err(VoteError::Io)?;
        let task = &mut self.tasks[i];
        task.votes.push(vote);
        Ok(Self::resolution(task))
    }
}

pub struct AppState {
    pub session: Mutex<Session>,
    pub token: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(session: Session, token: Option<String>, static_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState { session: Mutex::new(session), token, static_dir })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/vote", post(post_vote))
        .route("/api/progress", get(progress))
        .fallback(get(static_asset))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

/// The 401 to send back, if the token is required and wrong.
fn unauthorized(state: &AppState, params: &HashMap<String, String>) -> Option<Response> {
    match &state.token {
        Some(t) if params.get("token") != Some(t) => Some(error(StatusCode::UNAUTHORIZED, "missing or wrong token")),
        _ => None,
    }
}

#[derive(Serialize)]
struct TaskView<'a> {
    task_id: &'a str,
    text: &'a str,
    sentences: Vec<String>,
    error_indices: Vec<usize>,
    contradicted_indices: Vec<usize>,
    explanation: &'a str,
    votes: usize,
}

async fn next_task(State(state): State<Arc<AppState>>, Query(params): Query<HashMap<String, String>>) -> Response {
    if let Some(r) = unauthorized(&state, &params) {
        return r;
    }
    let Some(annotator) = params.get("annotator").filter(|a| !a.trim().is_empty()) else {
        return error(StatusCode::BAD_REQUEST, "query parameter 'annotator' is required");
    };
    let session = state.session.lock().unwrap();
    let progress = session.progress();
    match session.next_for(annotator) {
        None => Json(json!({ "done": true, "task": null, "progress": progress })).into_response(),
        Some(t) => {
            let (sentences, error_indices, contradicted_indices) = t.highlights();
            let view = TaskView {
                task_id: &t.task_id,
                text: &t.text,
                sentences: sentences.into_iter().map(|s| s.text).collect(),
                error_indices,
                contradicted_indices,
                explanation: &t.explanation,
                votes: t.votes.len(),
            };
            Json(json!({ "done": false, "task": view, "progress": progress })).into_response()
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteBody {
    annotator: String,
    verdict: AnnotationVerdict,
}

fn now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

async fn post_vote(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(params): Query<HashMap<String, String>>,
    body: Bytes,
) -> Response {
    if let Some(r) = unauthorized(&state, &params) {
        return r;
    }
    let body: VoteBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed vote: {e}")),
    };
    if body.annotator.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "annotator is empty");
    }
    let mut session = state.session.lock().unwrap();
    match session.vote(&id, &body.annotator, body.verdict, now()) {
        Ok(resolution) => {
            Json(json!({ "task_id": id, "resolution": resolution, "progress": session.progress() })).into_response()
        }
        Err(VoteError::UnknownTask) => error(StatusCode::NOT_FOUND, format!("unknown task {id}")),
        Err(VoteError::AlreadyVoted) => {
            error(StatusCode::CONFLICT, format!("{} already voted on {id}", body.annotator))
        }
        Err(VoteError::Resolved) => error(StatusCode::CONFLICT, format!("task {id} is already resolved")),
        Err(VoteError::Io(e)) => {
            log::error!("vote log write failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "could not persist vote")
        }
    }
}

async fn progress(State(state): State<Arc<AppState>>, Query(params): Query<HashMap<String, String>>) -> Response {
    if let Some(r) = unauthorized(&state, &params) {
        return r;
    }
    Json(state.session.lock().unwrap().progress()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn static_asset(State(state): State<Arc<AppState>>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel_path = Path::new(rel);
    if rel_path.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    if let Some(dir) = &state.static_dir {
        let path = dir.join(rel_path);
        if let Ok(bytes) = tokio::fs::read(&path).await {
            return ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response();
        }
    }
    if rel == "index.html" {
        return ([(header::CONTENT_TYPE, "text/html; charset=utf-8")], INDEX_HTML).into_response();
    }
    error(StatusCode::NOT_FOUND, "not found")
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
