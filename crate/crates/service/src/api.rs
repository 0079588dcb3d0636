//! The HTTP+JSON API. Every route is listed in [`ROUTES`], which is kept in
//! step with `api/openapi.json` by the test suite.

use std::path::{Component, Path as FsPath, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use chrono::Utc;
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crowdlab_core::analysis::{render_text, CleanupPolicy};
use crowdlab_core::engine::{effective_schedule, BlockProgress, RunOptions, RunState};
use crowdlab_core::platform::sim::PopulationProfile;
use crowdlab_core::platform::verify_hook_token;
use crowdlab_core::scheduler::{window_balance, SchedulerState, Schedule};
use crowdlab_core::store::{AuditEvent, Mutation, ShareToken};
use crowdlab_core::worker::{quota_key, EligibilityRequest, QuotaState, Toggles};
use crowdlab_core::{DataUnit, WorkflowDef};

use crate::error::ApiError;
use crate::ops::{self, Services, SimulateRequest};

pub const API_VERSION: &str = "1";
pub const VERSION_HEADER: &str = "x-crowdlab-api-version";
pub const SHARE_HEADER: &str = "x-share-token";
pub const HOOK_HEADER: &str = "x-hook-token";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub method: &'static str,
    pub path: &'static str,
}

impl Route {
    pub fn is_mutating(&self) -> bool {
        !matches!(self.method, "GET" | "HEAD")
    }
}

const fn r(method: &'static str, path: &'static str) -> Route {
    Route { method, path }
}

pub const ROUTES: &[Route] = &[
    r("GET", "/health"),
    r("GET", "/workflows"),
    r("POST", "/workflows"),
    r("GET", "/workflows/{id}"),
    r("PUT", "/workflows/{id}"),
    r("POST", "/workflows/{id}/validate"),
    r("POST", "/workflows/{id}/runs"),
    r("POST", "/workflows/{id}/share"),
    r("GET", "/runs"),
    r("GET", "/runs/{id}"),
    r("POST", "/runs/{id}/pause"),
    r("POST", "/runs/{id}/resume"),
    r("POST", "/runs/{id}/cancel"),
    r("POST", "/runs/{id}/advance"),
    r("POST", "/runs/{id}/eligibility"),
    r("GET", "/runs/{id}/report"),
    r("GET", "/runs/{id}/audit"),
    r("PUT", "/runs/{id}/quotas"),
    r("GET", "/runs/{id}/schedule-state"),
    r("POST", "/runs/{id}/share"),
    r("GET", "/share/{token}"),
    r("DELETE", "/share/{token}"),
];

pub struct AppState {
    pub services: Services,
    /// Directory `unitsRef` paths are resolved against.
    pub data_dir: PathBuf,
}

type Shared = Arc<AppState>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let state = Arc::new(state);
    Router::new()
        .route("/health", get(health))
        .route("/workflows", get(list_workflows).post(create_workflow))
        .route("/workflows/{id}", get(get_workflow).put(update_workflow))
        .route("/workflows/{id}/validate", post(validate_workflow))
        .route("/workflows/{id}/runs", post(create_run))
        .route("/workflows/{id}/share", post(share_workflow))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/pause", post(pause_run))
        .route("/runs/{id}/resume", post(resume_run))
        .route("/runs/{id}/cancel", post(cancel_run))
        .route("/runs/{id}/advance", post(advance_run))
        .route("/runs/{id}/eligibility", post(eligibility))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/audit", get(get_audit))
        .route("/runs/{id}/quotas", axum::routing::put(edit_quotas))
        .route("/runs/{id}/schedule-state", get(schedule_state))
        .route("/runs/{id}/share", post(share_run))
        .route("/share/{token}", get(open_share))
        .route("/share/{token}", delete(revoke_share))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(middleware::from_fn_with_state(state.clone(), share_guard))
        .layer(middleware::map_response(stamp_version))
        .with_state(state)
}

async fn stamp_version(mut res: Response) -> Response {
    res.headers_mut()
        .insert(VERSION_HEADER, HeaderValue::from_static(API_VERSION));
    res
}

/// Requests presenting a share token are read-only and confined to the
/// shared workflow or run.
async fn share_guard(State(state): State<Shared>, req: Request, next: Next) -> Response {
    let Some(token) = req.headers().get(SHARE_HEADER) else {
        return next.run(req).await;
    };
    let token = token.to_str().unwrap_or_default().to_string();
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    match check_share(&state, &token, &method, &path) {
        Ok(()) => next.run(req).await,
        Err(e) => e.into_response(),
    }
}

fn check_share(state: &AppState, token: &str, method: &Method, path: &str) -> ApiResult<()> {
    let store = &state.services.store;
    let share = store
        .read(|s| s.share(token).cloned())?
        .ok_or_else(|| ApiError::forbidden("invalid-token", "unknown share token"))?;
    if share.revoked {
        return Err(ApiError::forbidden("revoked-token", "share token has been revoked"));
    }
    if method != Method::GET && method != Method::HEAD {
        return Err(ApiError::forbidden("read-only", "share tokens grant read-only access"));
    }
    let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
    let allowed = match segments.as_slice() {
        ["health"] => true,
        ["share", t] => *t == token,
        ["workflows", id, ..] => share.workflow_id.as_deref() == Some(*id),
        ["runs", id, ..] => {
            share.run_id.as_deref() == Some(*id)
                || store
                    .read(|s| s.run(id).map(|r| r.workflow_id.clone()))?
                    .is_some_and(|w| share.workflow_id.as_deref() == Some(w.as_str()))
        }
        _ => false,
    };
    if allowed {
        Ok(())
    } else {
        Err(ApiError::forbidden("out-of-scope", "resource is outside the shared scope"))
    }
}

/// JSON body parsed strictly: unknown fields and malformed documents are a
/// 400 with code `invalid-body`.
pub struct Strict<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Strict<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { &bytes };
        serde_json::from_slice(bytes)
            .map(Strict)
            .map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "apiVersion": API_VERSION }))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct WorkflowRef {
    id: String,
    version: u32,
    name: String,
}

async fn list_workflows(State(st): State<Shared>) -> ApiResult<Json<Vec<WorkflowRef>>> {
    let list = st.services.store.read(|s| {
        s.workflow_ids()
            .filter_map(|id| s.latest_workflow(id))
            .map(|d| WorkflowRef {
                id: d.id.clone().unwrap_or_default(),
                version: d.version,
                name: d.name.clone(),
            })
            .collect()
    })?;
    Ok(Json(list))
}

fn reject_invalid(def: &WorkflowDef) -> ApiResult<()> {
    let violations = ops::validate_definition(def, None);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ApiError::invalid_workflow(&violations))
    }
}

async fn create_workflow(State(st): State<Shared>, Strict(mut def): Strict<WorkflowDef>) -> ApiResult<Response> {
    reject_invalid(&def)?;
    if let Some(id) = &def.id {
        if st.services.store.read(|s| s.latest_workflow(id).is_some())? {
            return Err(ApiError::conflict("already-exists", format!("workflow {id} already exists")));
        }
    }
    def.version = 1;
    let stored = st.services.engine.put_workflow(&def)?;
    let body = json!({ "id": stored.id, "version": stored.version });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct VersionQuery {
    version: Option<u32>,
}

fn load_workflow(st: &AppState, id: &str, version: Option<u32>) -> ApiResult<WorkflowDef> {
    st.services
        .store
        .read(|s| match version {
            Some(v) => s.workflow(id, v).cloned(),
            None => s.latest_workflow(id).cloned(),
        })?
        .ok_or_else(|| ApiError::not_found(format!("workflow {id}")))
}

async fn get_workflow(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> ApiResult<Json<WorkflowDef>> {
    Ok(Json(load_workflow(&st, &id, q.version)?))
}

/// Saves a new version. The body's `version` must be the latest stored
/// version (the one that was edited); anything else is a conflict.
async fn update_workflow(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Strict(mut def): Strict<WorkflowDef>,
) -> ApiResult<Json<Value>> {
    let current = load_workflow(&st, &id, None)?;
    if def.id.as_deref().is_some_and(|d| d != id) {
        return Err(ApiError::bad_request("body id does not match the path"));
    }
    if def.version != current.version {
        return Err(ApiError::conflict(
            "version-conflict",
            format!("edited version {} but latest is {}", def.version, current.version),
        ));
    }
    reject_invalid(&def)?;
    def.id = Some(id);
    def.version = current.version + 1;
    let stored = st.services.engine.put_workflow(&def)?;
    Ok(Json(json!({ "id": stored.id, "version": stored.version })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ValidateBody {
    version: Option<u32>,
    units: Option<Vec<DataUnit>>,
    units_ref: Option<String>,
}

async fn validate_workflow(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Strict(body): Strict<ValidateBody>,
) -> ApiResult<Json<Value>> {
    let def = load_workflow(&st, &id, body.version)?;
    let units = match (body.units, body.units_ref) {
        (Some(u), None) => Some(u),
        (None, Some(r)) => Some(load_units_ref(&st, &r)?),
        (None, None) => None,
        _ => return Err(ApiError::bad_request("give units or unitsRef, not both")),
    };
    let violations = ops::validate_definition(&def, units.as_deref());
    Ok(Json(json!({ "valid": violations.is_empty(), "violations": violations })))
}

/// Resolves a `unitsRef` inside the data directory; absolute paths and `..`
/// are refused.
fn load_units_ref(st: &AppState, r: &str) -> ApiResult<Vec<DataUnit>> {
    let rel = FsPath::new(r);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ApiError::bad_request("unitsRef must be a relative path inside the data directory"));
    }
    crate::files::load_units(&st.data_dir.join(rel))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CreateRunBody {
    adapter: String,
    version: Option<u32>,
    units: Option<Vec<DataUnit>>,
    units_ref: Option<String>,
    toggles: Option<Toggles>,
    seed: Option<u64>,
    run_id: Option<String>,
    /// Simulator only.
    profile: Option<PopulationProfile>,
    horizon_hours: Option<u32>,
}

async fn create_run(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Strict(body): Strict<CreateRunBody>,
) -> ApiResult<Response> {
    let def = load_workflow(&st, &id, body.version)?;
    let units = match (body.units, &body.units_ref) {
        (Some(u), None) => u,
        (None, Some(r)) => load_units_ref(&st, r)?,
        _ => return Err(ApiError::bad_request("give exactly one of units and unitsRef")),
    };
    let toggles = body.toggles.unwrap_or_default();
    let seed = body.seed.unwrap_or(0);
    if body.adapter == crowdlab_core::platform::sim::SIM_ADAPTER_ID {
        if body.run_id.is_some() {
            return Err(ApiError::bad_request("simulated runs are named after their seed"));
        }
        let req = SimulateRequest {
            def,
            units,
            profile: body.profile.unwrap_or_else(PopulationProfile::calibrated),
            seed,
            toggles,
            horizon_hours: body.horizon_hours,
        };
        let store = st.services.store.clone();
        let summary = tokio::task::spawn_blocking(move || ops::simulate(&store, req))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        return Ok((StatusCode::CREATED, Json(json!(summary))).into_response());
    }
    if body.profile.is_some() || body.horizon_hours.is_some() {
        return Err(ApiError::bad_request("profile and horizonHours apply to the sim adapter only"));
    }
    let opts = RunOptions {
        run_id: body.run_id,
        seed,
        toggles,
        adapter: Some(body.adapter),
    };
    let run = ops::start(&st.services, &def, &units, opts)?;
    Ok((StatusCode::CREATED, Json(json!({ "runId": run.run_id, "status": run.status }))).into_response())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct RunView {
    run: RunState,
    blocks: Vec<BlockProgress>,
    judgments: usize,
}

async fn list_runs(State(st): State<Shared>) -> ApiResult<Json<Vec<RunState>>> {
    Ok(Json(st.services.store.read(|s| s.runs().cloned().collect())?))
}

fn run_view(st: &AppState, id: &str) -> ApiResult<RunView> {
    let engine = &st.services.engine;
    let run = engine.run_state(id)?;
    let blocks = engine.progress(id)?;
    let judgments = st.services.store.read(|s| s.judgments(id).len())?;
    Ok(RunView { run, blocks, judgments })
}

async fn get_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunView>> {
    Ok(Json(run_view(&st, &id)?))
}

const REQUESTER: &str = "requester";

async fn pause_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunState>> {
    Ok(Json(st.services.engine.pause_run(&id, REQUESTER)?))
}

async fn resume_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunState>> {
    Ok(Json(st.services.engine.resume_paused(&id, REQUESTER)?))
}

async fn cancel_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<RunState>> {
    Ok(Json(st.services.engine.cancel_run(&id, REQUESTER)?))
}

/// One scheduler tick followed by every block step that can make progress.
async fn advance_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let engine = &st.services.engine;
    let run = engine.run_state(&id)?;
    if run.adapter.as_deref() == Some(crowdlab_core::platform::sim::SIM_ADAPTER_ID) {
        return Err(ApiError::conflict("simulated-run", "simulated runs are driven by the simulator"));
    }
    let commands = engine.tick(&id)?;
    let outcome = engine.run_until_idle(&id)?;
    Ok(Json(json!({ "commands": commands, "outcome": outcome })))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct EligibilityBody {
    platform_worker_id: String,
    fingerprint: String,
    country: String,
    block_id: Option<String>,
    request_id: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct EligibilityResponse {
    action: crowdlab_core::worker::Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    block: Option<String>,
    reason: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    message: Option<String>,
    session: u32,
}

/// The task-page hook. Authenticated by the per-run token embedded in the
/// published task.
async fn eligibility(
    State(st): State<Shared>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Strict(body): Strict<EligibilityBody>,
) -> ApiResult<Json<EligibilityResponse>> {
    let token = headers.get(HOOK_HEADER).and_then(|v| v.to_str().ok()).unwrap_or_default();
    if !verify_hook_token(st.services.engine.hook_secret(), &id, token) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "hook-unauthorized", "missing or invalid hook token"));
    }
    let req = EligibilityRequest {
        platform_worker_id: body.platform_worker_id,
        fingerprint: body.fingerprint,
        country: body.country,
        block_id: body.block_id,
        request_id: body.request_id,
    };
    let d = st.services.engine.workers().decide_eligibility(&id, &req)?;
    Ok(Json(EligibilityResponse {
        action: d.action,
        group: d.group,
        block: d.block,
        reason: d.reason.as_str(),
        message: d.message,
        session: d.session,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ReportQuery {
    format: Option<String>,
    /// Comma-separated cleanup policies.
    cleanup: Option<String>,
}

async fn get_report(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let cleanup = match q.cleanup {
        Some(list) => Some(
            list.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| {
                    serde_json::from_value::<CleanupPolicy>(Value::String(p.trim().to_string()))
                        .map_err(|_| ApiError::bad_request(format!("unknown cleanup policy {p}")))
                })
                .collect::<ApiResult<Vec<_>>>()?,
        ),
        None => None,
    };
    let report = ops::report(&st.services.store, &id, cleanup)?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("text") => Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], render_text(&report)).into_response()),
        Some(other) => Err(ApiError::bad_request(format!("unknown format {other}"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct AuditPage {
    events: Vec<AuditEvent>,
    offset: usize,
    total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    next: Option<usize>,
}

async fn get_audit(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> ApiResult<Json<AuditPage>> {
    st.services.engine.run_state(&id)?;
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(100).clamp(1, 1000);
    let (events, total) = st.services.store.read(|s| {
        let all: Vec<&AuditEvent> = s.audit_for(&id).collect();
        let page = all.iter().skip(offset).take(limit).map(|e| (*e).clone()).collect::<Vec<_>>();
        (page, all.len())
    })?;
    let next = (offset + events.len() < total).then_some(offset + events.len());
    Ok(Json(AuditPage {
        events,
        offset,
        total,
        next,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct QuotaEdit {
    max_share: f64,
}

/// Queues a new cap; it takes effect at the next scheduler checkpoint.
async fn edit_quotas(
    State(st): State<Shared>,
    Path(id): Path<String>,
    Strict(body): Strict<QuotaEdit>,
) -> ApiResult<Response> {
    if !(body.max_share > 0.0 && body.max_share <= 1.0) {
        return Err(ApiError::bad_request("maxShare must be in (0, 1]"));
    }
    st.services.engine.run_state(&id)?;
    st.services.engine.workers().request_quota_edit(&id, body.max_share)?;
    let state: Option<QuotaState> = st.services.store.read(|s| s.meta(&quota_key(&id)))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "quota": state }))).into_response())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ScheduleView {
    schedule: Schedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    state: Option<SchedulerState>,
    /// Whether `now` falls in an active window.
    in_window: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    window_balance: Option<crowdlab_core::scheduler::WindowBalance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quota: Option<QuotaState>,
}

async fn schedule_state(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ScheduleView>> {
    let engine = &st.services.engine;
    let run = engine.run_state(&id)?;
    let def = load_workflow(&st, &run.workflow_id, Some(run.workflow_version))?;
    let schedule = effective_schedule(&def, run.toggles);
    let state = engine.scheduler_state(&id)?;
    let quota: Option<QuotaState> = st.services.store.read(|s| s.meta(&quota_key(&id)))?;
    Ok(Json(ScheduleView {
        in_window: schedule.window_at(engine.clock().now()).is_some(),
        window_balance: state.as_ref().map(|s| window_balance(s, schedule.window_count())),
        schedule,
        state,
        quota,
    }))
}

/// 256 random bits, hex encoded.
fn fresh_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

fn put_share(st: &AppState, workflow_id: Option<String>, run_id: Option<String>) -> ApiResult<Response> {
    let share = ShareToken {
        token: fresh_token(),
        workflow_id,
        run_id,
        created_at: Utc::now(),
        revoked: false,
    };
    st.services.store.commit(vec![Mutation::PutShare { share: share.clone() }])?;
    let body = json!({ "token": share.token, "url": format!("/share/{}", share.token), "share": share });
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn share_workflow(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    load_workflow(&st, &id, None)?;
    put_share(&st, Some(id), None)
}

async fn share_run(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Response> {
    st.services.engine.run_state(&id)?;
    put_share(&st, None, Some(id))
}

fn live_share(st: &AppState, token: &str) -> ApiResult<ShareToken> {
    let share = st
        .services
        .store
        .read(|s| s.share(token).cloned())?
        .ok_or_else(|| ApiError::not_found("share token"))?;
    if share.revoked {
        return Err(ApiError::forbidden("revoked-token", "share token has been revoked"));
    }
    Ok(share)
}

/// What a share link shows: the workflow (latest version) and its runs, or
/// a single run.
async fn open_share(State(st): State<Shared>, Path(token): Path<String>) -> ApiResult<Json<Value>> {
    let share = live_share(&st, &token)?;
    if let Some(run_id) = &share.run_id {
        let view = run_view(&st, run_id)?;
        let def = load_workflow(&st, &view.run.workflow_id, Some(view.run.workflow_version))?;
        return Ok(Json(json!({ "share": share, "workflow": def, "run": view })));
    }
    let wid = share.workflow_id.clone().unwrap_or_default();
    let def = load_workflow(&st, &wid, None)?;
    let runs: Vec<RunState> = st
        .services
        .store
        .read(|s| s.runs().filter(|r| r.workflow_id == wid).cloned().collect())?;
    Ok(Json(json!({ "share": share, "workflow": def, "runs": runs })))
}

async fn revoke_share(State(st): State<Shared>, Path(token): Path<String>) -> ApiResult<StatusCode> {
    let mut share = st
        .services
        .store
        .read(|s| s.share(&token).cloned())?
        .ok_or_else(|| ApiError::not_found("share token"))?;
    if !share.revoked {
        share.revoked = true;
        st.services.store.commit(vec![Mutation::PutShare { share }])?;
    }
    Ok(StatusCode::NO_CONTENT)
}
