//! HTTP+JSON service API with server-sent event streams per topic.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/health` | | `{"ok":true}` |
//! | POST | `/scenarios/validate` | scenario TOML | `{"valid":bool,"errors":[..]}` |
//! | GET | `/runs` | | `[RunStatus]` |
//! | POST | `/runs` | `StartRun` | `201 RunStatus` |
//! | GET | `/runs/{id}` | | `RunStatus` |
//! | DELETE | `/runs/{id}` | | `204` |
//! | POST | `/runs/{id}/stop` | | `ExternalEvent` |
//! | POST | `/runs/{id}/pause`, `/resume?until` | | `RunStatus` |
//! | GET | `/runs/{id}/topics/{topic}/records?from&limit` | | `{"head":n,"records":[Record]}` |
//! | GET | `/runs/{id}/topics/{topic}/stream?from` | | SSE, `id` = offset, resumes from `Last-Event-ID` |
//! | POST | `/runs/{id}/faults` | `FaultSpec` | `201 {"event":ExternalEvent,"window":Window}` |
//! | POST | `/runs/{id}/what-if` | `WhatIfRequest` | `WhatIfReport` |
//! | POST | `/runs/{id}/sweep` | `SweepRequest` | `VulnerabilityMap` |
//! | GET | `/runs/{id}/report` | | `RunReport` |
//! | GET | `/runs/{id}/externals` | | `[ExternalEvent]` |
//! | GET | `/runs/{id}/siem` | | newline-delimited JSON |
//! | GET | `/runs/{id}/advisories` | | `{"advisories":[..],"decisions":[..]}` |
//! | POST | `/runs/{id}/advisories/{aid}/confirm` | `ConfirmRequest` | `201 ExternalEvent`; 404 unknown, 409 already decided |
//!
//! Errors are `{"error": message}` with 400/403/404/409/422/500.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use byztwin_core::advisory::AdvisoryError;
use byztwin_core::sim::dur;
use byztwin_core::store::{export_siem, Body, StoreError};
use byztwin_core::{
    ExternalAction, FaultSpec, Record, Scenario, SimTime, SweepAxis, Topic, TwinError, WhatIfDelta, WorldError,
};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::rundir;
use crate::runs::{RunError, RunHandle, RunManager, RunSpec};

/// The principal console requests act as.
pub const CONSOLE: &str = "console";
const STREAM_POLL: Duration = Duration::from_millis(20);
const MAX_PAGE: usize = 1000;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let code = match &e {
            RunError::UnknownRun(_) => StatusCode::NOT_FOUND,
            RunError::Finished(_) => StatusCode::CONFLICT,
            RunError::World(w) => world_status(w),
            RunError::Twin(t) => twin_status(t),
            RunError::RunDir(rundir::RunDirError::NotEmpty(_)) => StatusCode::CONFLICT,
            RunError::Gone | RunError::RunDir(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(store_status(&e), e.to_string())
    }
}

impl From<TwinError> for ApiError {
    fn from(e: TwinError) -> Self {
        ApiError(twin_status(&e), e.to_string())
    }
}

fn store_status(e: &StoreError) -> StatusCode {
    match e {
        StoreError::Unauthorized { .. } => StatusCode::FORBIDDEN,
        StoreError::UnknownTopic(_) => StatusCode::NOT_FOUND,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn world_status(e: &WorldError) -> StatusCode {
    match e {
        WorldError::Advisory(AdvisoryError::Unknown(_)) => StatusCode::NOT_FOUND,
        WorldError::Advisory(AdvisoryError::AlreadyDecided(_)) => StatusCode::CONFLICT,
        WorldError::Scenario(_) | WorldError::InvalidExternal(_) | WorldError::Fault(_) => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        WorldError::Store(s) => store_status(s),
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn twin_status(e: &TwinError) -> StatusCode {
    match e {
        TwinError::UnknownSnapshot(_) => StatusCode::NOT_FOUND,
        TwinError::InvalidDelta(_) | TwinError::InvalidFaults(_) | TwinError::BudgetExceeded { .. } => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(runs: Arc<RunManager>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/scenarios/validate", post(validate))
        .route("/runs", get(list_runs).post(start_run))
        .route("/runs/{id}", get(run_status).delete(delete_run))
        .route("/runs/{id}/stop", post(stop_run))
        .route("/runs/{id}/pause", post(pause_run))
        .route("/runs/{id}/resume", post(resume_run))
        .route("/runs/{id}/topics/{topic}/records", get(records))
        .route("/runs/{id}/topics/{topic}/stream", get(stream_topic))
        .route("/runs/{id}/faults", post(inject))
        .route("/runs/{id}/what-if", post(what_if))
        .route("/runs/{id}/sweep", post(sweep))
        .route("/runs/{id}/report", get(report))
        .route("/runs/{id}/externals", get(externals))
        .route("/runs/{id}/siem", get(siem))
        .route("/runs/{id}/advisories", get(advisories))
        .route("/runs/{id}/advisories/{aid}/confirm", post(confirm))
        .with_state(runs)
}

async fn validate(body: String) -> Json<serde_json::Value> {
    let errors: Vec<String> = match Scenario::from_toml(&body) {
        Err(e) => vec![e.to_string()],
        Ok(s) => match s.validate() {
            Ok(()) => Vec::new(),
            Err(v) => v.0.iter().map(|e| e.to_string()).collect(),
        },
    };
    Json(json!({ "valid": errors.is_empty(), "errors": errors }))
}

#[derive(Debug, Deserialize)]
pub struct StartRun {
    /// Scenario TOML text.
    pub scenario: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub auto_confirm: Option<bool>,
    #[serde(default, with = "dur::option")]
    pub slice: Option<SimTime>,
    /// Simulated seconds per wall second.
    #[serde(default)]
    pub pace: Option<f64>,
    #[serde(default)]
    pub paused: bool,
}

async fn list_runs(State(runs): State<Arc<RunManager>>) -> impl IntoResponse {
    Json(runs.list())
}

async fn start_run(State(runs): State<Arc<RunManager>>, Json(req): Json<StartRun>) -> ApiResult<Response> {
    let scenario = Scenario::from_toml(&req.scenario).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let mut spec = RunSpec::new(scenario);
    spec.seed = req.seed;
    spec.auto_confirm = req.auto_confirm;
    spec.pace = req.pace;
    spec.paused = req.paused;
    if let Some(s) = req.slice {
        if s == SimTime::ZERO {
            return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "slice must be positive".into()));
        }
        spec.slice = s;
    }
    let h = tokio::task::spawn_blocking(move || runs.start(spec))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    tracing::info!(run = %h.id, "run started");
    Ok((StatusCode::CREATED, Json(h.status())).into_response())
}

async fn run_status(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(runs.get(&id)?.status()))
}

async fn delete_run(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    tokio::task::spawn_blocking(move || runs.remove(&id))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(StatusCode::NO_CONTENT)
}

async fn stop_run(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let ev = runs.get(&id)?.submit(CONSOLE, ExternalAction::Stop).await?;
    Ok(Json(ev))
}

async fn pause_run(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let h = runs.get(&id)?;
    h.pause()?;
    Ok(Json(h.status()))
}

#[derive(Debug, Deserialize)]
pub struct ResumeQuery {
    /// Pause again at this simulated time.
    #[serde(default, with = "dur::option")]
    pub until: Option<SimTime>,
}

async fn resume_run(
    State(runs): State<Arc<RunManager>>,
    Path(id): Path<String>,
    Query(q): Query<ResumeQuery>,
) -> ApiResult<impl IntoResponse> {
    let h = runs.get(&id)?;
    h.resume(q.until)?;
    Ok(Json(h.status()))
}

#[derive(Debug, Deserialize)]
pub struct Page {
    #[serde(default)]
    pub from: u64,
    #[serde(default)]
    pub limit: Option<usize>,
}

fn topic(h: &RunHandle, name: &str) -> ApiResult<Topic> {
    let t: Topic = name.parse()?;
    h.broker.policy().check_subscribe(CONSOLE, t)?;
    Ok(t)
}

async fn records(
    State(runs): State<Arc<RunManager>>,
    Path((id, name)): Path<(String, String)>,
    Query(page): Query<Page>,
) -> ApiResult<impl IntoResponse> {
    let h = runs.get(&id)?;
    let t = topic(&h, &name)?;
    let head = h.broker.head(t);
    let from = page.from.min(head);
    let limit = page.limit.unwrap_or(MAX_PAGE).min(MAX_PAGE) as u64;
    let recs = h.broker.replay(t, from..head.min(from + limit))?;
    Ok(Json(json!({ "head": head, "records": recs })))
}

#[derive(Debug, Deserialize)]
pub struct StreamFrom {
    #[serde(default)]
    pub from: Option<u64>,
}

/// Historical records from the cursor, then the live tail. The stream ends
/// once the run is over and the head has been delivered.
async fn stream_topic(
    State(runs): State<Arc<RunManager>>,
    Path((id, name)): Path<(String, String)>,
    Query(q): Query<StreamFrom>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let h = runs.get(&id)?;
    let t = topic(&h, &name)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .map(|v| v.parse::<u64>().map(|o| o + 1))
        .transpose()
        .map_err(|_| ApiError::bad_request("Last-Event-ID must be a record offset"))?;
    let cursor = resume.or(q.from).unwrap_or(0);
    let buf: VecDeque<Arc<Record>> = VecDeque::new();
    let s = stream::unfold((h, cursor, buf), move |(h, mut cursor, mut buf)| async move {
        loop {
            if let Some(r) = buf.pop_front() {
                let ev = record_event(&r);
                return Some((Ok(ev), (h, cursor, buf)));
            }
            let done = h.is_finished();
            let head = h.broker.head(t);
            if cursor < head {
                buf.extend(h.broker.replay(t, cursor..head).unwrap_or_default());
                cursor = head;
                continue;
            }
            if done {
                return None;
            }
            tokio::time::sleep(STREAM_POLL).await;
        }
    });
    Ok(Sse::new(s).keep_alive(KeepAlive::default()))
}

fn record_event(r: &Record) -> Event {
    Event::default()
        .id(r.offset.to_string())
        .event(r.topic.as_str())
        .json_data(r)
        .expect("records encode")
}

#[derive(Debug, Serialize)]
struct Injected {
    event: byztwin_core::ExternalEvent,
    /// Activation window in run time.
    window: byztwin_core::Window,
}

async fn inject(
    State(runs): State<Arc<RunManager>>,
    Path(id): Path<String>,
    Json(spec): Json<FaultSpec>,
) -> ApiResult<Response> {
    let h = runs.get(&id)?;
    let window = spec.window;
    let event = h.submit(CONSOLE, ExternalAction::InjectFault { spec }).await?;
    let window = window.shifted(event.at);
    Ok((StatusCode::CREATED, Json(Injected { event, window })).into_response())
}

#[derive(Debug, Deserialize)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub delta: WhatIfDelta,
    /// Windows are relative to the branch point.
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(with = "dur")]
    pub horizon: SimTime,
    #[serde(default)]
    pub seed: Option<u64>,
}

async fn what_if(
    State(runs): State<Arc<RunManager>>,
    Path(id): Path<String>,
    Json(req): Json<WhatIfRequest>,
) -> ApiResult<impl IntoResponse> {
    let frozen = runs.get(&id)?.freeze().await?;
    let r = tokio::task::spawn_blocking(move || {
        frozen
            .twin
            .what_if(&frozen.snapshot, req.delta, req.faults, req.horizon, req.seed)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(r))
}

#[derive(Debug, Deserialize)]
pub struct SweepRequest {
    pub axes: Vec<SweepAxis>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(with = "dur")]
    pub horizon: SimTime,
    #[serde(default)]
    pub budget: Option<usize>,
}

async fn sweep(
    State(runs): State<Arc<RunManager>>,
    Path(id): Path<String>,
    Json(req): Json<SweepRequest>,
) -> ApiResult<impl IntoResponse> {
    let h = runs.get(&id)?;
    let budget = req.budget.unwrap_or(h.scenario.twin.max_cells);
    let frozen = h.freeze().await?;
    let map = tokio::task::spawn_blocking(move || {
        frozen
            .twin
            .sweep(&frozen.snapshot, &req.axes, &req.faults, req.horizon, budget)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(map))
}

async fn report(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(runs.get(&id)?.report()?))
}

async fn externals(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(rundir::externals(&runs.get(&id)?.broker)))
}

async fn siem(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = runs.get(&id)?;
    let mut out = Vec::new();
    export_siem(&h.broker, 0..h.broker.head(Topic::SiemEvents), &mut out)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn advisories(State(runs): State<Arc<RunManager>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let h = runs.get(&id)?;
    let advisories: Vec<_> = h
        .broker
        .records(Topic::TwinAdvisory)
        .iter()
        .filter_map(|r| match &r.body {
            Body::Advisory(a) => Some(a.clone()),
            _ => None,
        })
        .collect();
    let decisions = h.decisions().await?;
    Ok(Json(json!({ "advisories": advisories, "decisions": decisions })))
}

#[derive(Debug, Deserialize)]
pub struct ConfirmRequest {
    pub approve: bool,
    #[serde(default)]
    pub rationale: String,
}

async fn confirm(
    State(runs): State<Arc<RunManager>>,
    Path((id, aid)): Path<(String, u64)>,
    Json(req): Json<ConfirmRequest>,
) -> ApiResult<Response> {
    let ev = runs
        .get(&id)?
        .submit(
            CONSOLE,
            ExternalAction::Confirm {
                advisory: aid,
                approve: req.approve,
                rationale: req.rationale,
            },
        )
        .await?;
    Ok((StatusCode::CREATED, Json(ev)).into_response())
}
