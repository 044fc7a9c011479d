//! HTTP API over a study directory.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AnnotationError, Result};
use crate::export::{export_rows, summarize, to_csv};
use crate::rating::RatingRecord;
use crate::store::RatingStore;
use crate::task::{PromptKind, Study, Task};

pub struct AppState {
    pub study: Study,
    /// The single writer: every append goes through this lock.
    pub store: Mutex<RatingStore>,
}

impl AppState {
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self> {
        let study = Study::open(&data_dir)?;
        let store = RatingStore::open(&data_dir)?;
        Ok(Self { study, store: Mutex::new(store) })
    }

    fn store(&self) -> std::sync::MutexGuard<'_, RatingStore> {
        // A panic while holding the lock cannot leave a half-written record
        // acknowledged, so the store stays usable.
        self.store.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Serialize)]
struct ImageRef {
    id: String,
    url: String,
}

#[derive(Serialize)]
struct SetView {
    label: String,
    images: Vec<ImageRef>,
}

#[derive(Serialize)]
struct TaskView {
    id: String,
    index: usize,
    prompt_id: String,
    prompt_text: String,
    prompt_kind: PromptKind,
    references: Vec<ImageRef>,
    sets: Vec<SetView>,
}

fn image_ref(id: &str) -> ImageRef {
    ImageRef { id: id.to_string(), url: format!("/images/{id}") }
}

impl From<&Task> for TaskView {
    fn from(t: &Task) -> Self {
        Self {
            id: t.id.clone(),
            index: t.index,
            prompt_id: t.prompt_id.clone(),
            prompt_text: t.prompt_text.clone(),
            prompt_kind: t.prompt_kind,
            references: t.references.iter().map(|i| image_ref(i)).collect(),
            sets: t
                .sets
                .iter()
                .map(|s| SetView { label: s.label.clone(), images: s.images.iter().map(|i| image_ref(i)).collect() })
                .collect(),
        }
    }
}

fn error_response(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn internal(e: AnnotationError) -> Response {
    log::error!("{e}");
    error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

async fn list_tasks(State(s): State<Arc<AppState>>) -> Json<Vec<TaskView>> {
    Json(s.study.tasks.iter().map(TaskView::from).collect())
}

async fn get_task(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match s.study.task(&id) {
        Some(t) => Json(TaskView::from(t)).into_response(),
        None => error_response(StatusCode::NOT_FOUND, format!("unknown task {id}")),
    }
}

async fn get_image(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(path) = s.study.image_path(&id) else {
        return error_response(StatusCode::NOT_FOUND, format!("unknown image {id}"));
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => internal(e.into()),
    }
}

async fn post_rating(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let value: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": [format!("body: {e}")] }))).into_response(),
    };
    let record = match RatingRecord::from_json(&value) {
        Ok(r) => r,
        Err(errors) => return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({ "errors": errors }))).into_response(),
    };
    if s.study.task(&record.task_id).is_none() {
        return error_response(StatusCode::NOT_FOUND, format!("unknown task {}", record.task_id));
    }
    let state = Arc::clone(&s);
    let stored = tokio::task::spawn_blocking(move || state.store().append(record)).await;
    match stored {
        Ok(Ok(r)) => Json(json!({ "id": r.id, "version": r.version })).into_response(),
        Ok(Err(e)) => internal(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Deserialize)]
struct ExportQuery {
    annotator: Option<String>,
}

fn export_for(s: &AppState, q: &ExportQuery) -> Result<Vec<crate::export::ExportRow>> {
    let store = s.store();
    let latest = store.latest(q.annotator.as_deref());
    export_rows(&s.study, &latest)
}

async fn get_export(State(s): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> Response {
    match export_for(&s, &q).and_then(|rows| to_csv(&rows)) {
        Ok(text) => ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], text).into_response(),
        Err(e) => internal(e),
    }
}

async fn get_summary(State(s): State<Arc<AppState>>, Query(q): Query<ExportQuery>) -> Response {
    match export_for(&s, &q) {
        Ok(rows) => Json(summarize(&rows, s.study.tasks.len())).into_response(),
        Err(e) => internal(e),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}", get(get_task))
        .route("/images/{id}", get(get_image))
        .route("/ratings", post(post_rating))
        .route("/export", get(get_export))
        .route("/export/summary", get(get_summary))
        .with_state(state)
}

/// Serve on an already-bound listener until `shutdown` resolves.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Open `data_dir`, bind `addr` and serve until Ctrl-C.
pub fn run(addr: SocketAddr, data_dir: impl AsRef<Path>) -> Result<()> {
    let state = Arc::new(AppState::open(data_dir)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("annotation service listening on {}", listener.local_addr()?);
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

/// A server running on its own thread, stopped on [`RunningServer::stop`] or drop.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<()>>>,
}

impl RunningServer {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Shut down gracefully and wait for in-flight requests to finish.
    pub fn stop(mut self) -> Result<()> {
        self.shutdown_and_join()
    }

    fn shutdown_and_join(&mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(h) => h.join().map_err(|_| AnnotationError::Corrupt("server thread panicked".into()))?,
            None => Ok(()),
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown_and_join() {
            log::error!("{e}");
        }
    }
}

/// Open `data_dir` and serve it on `addr` (port 0 picks a free port) from a background thread.
pub fn spawn(addr: SocketAddr, data_dir: impl AsRef<Path>) -> Result<RunningServer> {
    let state = Arc::new(AppState::open(data_dir)?);
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || -> Result<()> {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            serve(listener, state, async {
                let _ = rx.await;
            })
            .await
        })
    });
    Ok(RunningServer { addr, shutdown: Some(tx), thread: Some(thread) })
}
