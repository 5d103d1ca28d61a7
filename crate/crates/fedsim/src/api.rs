//! HTTP API over the run store, with a bounded pool of concurrent runs.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fedsim_core::engine::{execute, RunConfig, RunHandle, RunStatus};
use fedsim_core::store::{ExperimentRecord, ListFilter, RecordWriter, Scale, Store, StoreError, XAxis, YAxis};
use serde::Deserialize;
use serde_json::json;

use crate::args::{check_config, emit_cli_line};

struct Queued {
    config: RunConfig,
    handle: RunHandle,
    writer: RecordWriter,
}

#[derive(Default)]
struct Slots {
    running: HashMap<String, RunHandle>,
    queued: VecDeque<Queued>,
}

struct Inner {
    store: Store,
    max_runs: usize,
    slots: Mutex<Slots>,
    idle: Condvar,
}

/// Accepts runs, executes up to `max_runs` at once and queues the rest in order.
#[derive(Clone)]
pub struct RunManager {
    inner: Arc<Inner>,
}

#[derive(Debug, PartialEq)]
pub enum StopResult {
    Requested(RunStatus),
    AlreadyTerminal(RunStatus),
}

impl RunManager {
    pub fn new(store: Store, max_runs: usize) -> Self {
        RunManager {
            inner: Arc::new(Inner {
                store,
                max_runs: max_runs.max(1),
                slots: Mutex::new(Slots::default()),
                idle: Condvar::new(),
            }),
        }
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn max_runs(&self) -> usize {
        self.inner.max_runs
    }

    fn slots(&self) -> MutexGuard<'_, Slots> {
        self.inner.slots.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Validates, persists a pending record and schedules the run.
    pub fn submit(&self, config: RunConfig) -> Result<String, ApiError> {
        check_config(&config).map_err(ApiError::BadRequest)?;
        let store = &self.inner.store;
        let id = store.new_id();
        let writer = RecordWriter::new(store.clone(), ExperimentRecord::new(id.clone(), config.clone()))?;
        let job = Queued {
            config,
            handle: RunHandle::new(id.clone()),
            writer,
        };
        let mut slots = self.slots();
        if slots.running.len() < self.inner.max_runs {
            self.start(&mut slots, job);
        } else {
            log::info!("run {id} queued");
            slots.queued.push_back(job);
        }
        Ok(id)
    }

    fn start(&self, slots: &mut Slots, job: Queued) {
        let Queued {
            config,
            handle,
            mut writer,
        } = job;
        let id = handle.id().to_string();
        slots.running.insert(id.clone(), handle.clone());
        let manager = self.clone();
        std::thread::Builder::new()
            .name(format!("fedsim-run-{id}"))
            .spawn(move || {
                log::info!("run {id} started");
                let out = execute(&config, &handle, &mut writer);
                log::info!("run {id} ended: {}", out.status);
                manager.finished(&id);
            })
            .expect("spawning run thread");
    }

    fn finished(&self, id: &str) {
        let mut slots = self.slots();
        slots.running.remove(id);
        while slots.running.len() < self.inner.max_runs {
            match slots.queued.pop_front() {
                Some(job) => self.start(&mut slots, job),
                None => break,
            }
        }
        if slots.running.is_empty() && slots.queued.is_empty() {
            self.inner.idle.notify_all();
        }
    }

    /// Stops a running run at its next round boundary, or cancels a queued one.
    pub fn stop(&self, id: &str) -> Result<StopResult, ApiError> {
        let mut slots = self.slots();
        if let Some(h) = slots.running.get(id) {
            h.request_stop();
            return Ok(StopResult::Requested(h.status()));
        }
        if let Some(pos) = slots.queued.iter().position(|q| q.handle.id() == id) {
            let job = slots.queued.remove(pos).expect("position is in range");
            drop(slots);
            job.handle.request_stop();
            job.handle.advance(RunStatus::Stopped);
            let mut record = job.writer.record().clone();
            record.status = RunStatus::Stopped;
            self.inner.store.save(&record)?;
            return Ok(StopResult::Requested(RunStatus::Stopped));
        }
        drop(slots);
        let record = self.inner.store.load(id)?;
        Ok(StopResult::AlreadyTerminal(record.status))
    }

    pub fn running(&self) -> usize {
        self.slots().running.len()
    }

    pub fn queued(&self) -> usize {
        self.slots().queued.len()
    }

    /// Requests a stop for every active and queued run.
    pub fn stop_all(&self) {
        let ids: Vec<String> = {
            let slots = self.slots();
            slots
                .running
                .keys()
                .cloned()
                .chain(slots.queued.iter().map(|q| q.handle.id().to_string()))
                .collect()
        };
        for id in ids {
            let _ = self.stop(&id);
        }
    }

    /// Blocks until nothing is running or queued; false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let slots = self.slots();
        let (_slots, result) = self
            .inner
            .idle
            .wait_timeout_while(slots, timeout, |s| !s.running.is_empty() || !s.queued.is_empty())
            .unwrap_or_else(|e| e.into_inner());
        !result.timed_out()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::BadRequest(_) | ApiError::Store(StoreError::InvalidId(_) | StoreError::Export(_)) => {
                StatusCode::BAD_REQUEST
            }
            ApiError::Store(StoreError::NotFound(_)) => StatusCode::NOT_FOUND,
            ApiError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(manager: RunManager) -> Router {
    Router::new()
        .route("/experiments", post(create).get(list))
        .route("/experiments/{id}", get(show))
        .route("/experiments/{id}/stop", post(stop))
        .route("/experiments/{id}/cli", get(cli))
        .route("/experiments/{id}/export", get(export_one))
        .route("/export", get(export_many))
        .route("/system", get(system))
        .with_state(manager)
}

async fn create(State(m): State<RunManager>, body: Bytes) -> Result<Response, ApiError> {
    let config: RunConfig =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid configuration: {e}")))?;
    let id = m.submit(config)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

#[derive(Deserialize)]
struct ListQuery {
    group: Option<String>,
    algorithm: Option<String>,
    status: Option<String>,
}

async fn list(State(m): State<RunManager>, Query(q): Query<ListQuery>) -> Result<Response, ApiError> {
    let filter = ListFilter {
        group: q.group,
        algorithm: q.algorithm.map(|a| a.parse()).transpose().map_err(ApiError::BadRequest)?,
        status: q.status.map(|s| s.parse()).transpose().map_err(ApiError::BadRequest)?,
    };
    Ok(Json(m.store().list(&filter)?).into_response())
}

#[derive(Deserialize)]
struct ShowQuery {
    since_round: Option<usize>,
}

async fn show(
    State(m): State<RunManager>,
    Path(id): Path<String>,
    Query(q): Query<ShowQuery>,
) -> Result<Response, ApiError> {
    let mut record = m.store().load(&id)?;
    if let Some(k) = q.since_round {
        record.rows = record.rows_since(k).to_vec();
    }
    Ok(Json(record).into_response())
}

async fn stop(State(m): State<RunManager>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(match m.stop(&id)? {
        StopResult::Requested(status) => {
            (StatusCode::OK, Json(json!({ "id": id, "status": status, "stop_requested": true })))
        }
        StopResult::AlreadyTerminal(status) => (StatusCode::CONFLICT, Json(json!({ "id": id, "status": status }))),
    }
    .into_response())
}

async fn cli(State(m): State<RunManager>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record = m.store().load(&id)?;
    Ok(Json(json!({ "cli": emit_cli_line(&record.config) })).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    ids: Option<String>,
    x: Option<String>,
    y: Option<String>,
    scale: Option<String>,
}

fn export(m: &RunManager, ids: Vec<String>, q: &ExportQuery) -> Result<Response, ApiError> {
    fn pick<T: std::str::FromStr<Err = String>>(v: &Option<String>, default: T) -> Result<T, ApiError> {
        v.as_deref().map_or(Ok(default), |s| s.parse().map_err(ApiError::BadRequest))
    }
    if ids.is_empty() {
        return Err(ApiError::BadRequest("no experiment ids given".into()));
    }
    let x = pick(&q.x, XAxis::Rounds)?;
    let y = pick(&q.y, YAxis::GradNorm)?;
    let scale = pick(&q.scale, Scale::Linear)?;
    let out = m.store().export(&ids, x, y, scale)?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv".to_string()),
            (header::HeaderName::from_static("x-dropped-points"), out.dropped.to_string()),
        ],
        out.csv,
    )
        .into_response())
}

async fn export_one(
    State(m): State<RunManager>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> Result<Response, ApiError> {
    export(&m, vec![id], &q)
}

async fn export_many(State(m): State<RunManager>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let ids = q
        .ids
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    export(&m, ids, &q)
}

async fn system(State(m): State<RunManager>) -> Json<serde_json::Value> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    Json(json!({
        "workers": workers,
        "max_runs": m.max_runs(),
        "running": m.running(),
        "queued": m.queued(),
        "parallel": cfg!(feature = "parallel"),
    }))
}

/// Serves until Ctrl-C, then stops outstanding runs.
pub async fn serve(bind: &str, manager: RunManager) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    let shutdown = manager.clone();
    axum::serve(listener, router(manager))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            shutdown.stop_all();
        })
        .await
}
