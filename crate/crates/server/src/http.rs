//! Routes: launch and ingestion (LMS and tools), the JSON read API (console
//! and myLog), and static console assets.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::FormRejection;
use axum::extract::{Path, Query, State};
use axum::http::header::{ACCEPT, AUTHORIZATION, CACHE_CONTROL, CONTENT_TYPE};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Form, Json, Router};
use learnlog_core::analytics::{
    build_dashboard, build_exercise_table, build_session_view, build_timeline, render_item, RenderedItem,
};
use learnlog_core::auth::{
    authorize, IdentityVerifier, LaunchError, LaunchRequest, Pseudonym, ResourceRef, Role, Session, Viewer,
};
use learnlog_core::model::{is_valid_pattern, FieldValue};
use learnlog_core::service::{IngestError, LaunchFailure, LogService};
use learnlog_core::store::{AppendOutcome, Bucket, Page, StoreError, TimeRange};
use learnlog_core::{ActivityConfig, SessionId, SessionToken, Timestamp};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

const DEFAULT_PAGE: usize = 100;
const MAX_PAGE: usize = 1000;

pub struct AppState {
    pub service: Arc<LogService>,
    pub identity: IdentityVerifier,
    /// Absolute, without trailing slash.
    pub base_url: String,
    pub console_dir: Option<PathBuf>,
    pub rate: RateLimiter,
    pub clock: Clock,
}

impl AppState {
    pub fn new(service: Arc<LogService>, identity: IdentityVerifier, base_url: &str) -> Self {
        AppState {
            service,
            identity,
            base_url: base_url.trim_end_matches('/').to_owned(),
            console_dir: None,
            rate: RateLimiter::new(50),
            clock: Arc::new(Timestamp::now),
        }
    }

    fn now(&self) -> Timestamp {
        (self.clock)()
    }
}

/// Token bucket per session: `per_second` events, bursts up to the same.
pub struct RateLimiter {
    per_second: f64,
    buckets: Mutex<HashMap<SessionId, (f64, Instant)>>,
}

impl RateLimiter {
    pub fn new(per_second: u32) -> Self {
        RateLimiter {
            per_second: f64::from(per_second.max(1)),
            buckets: Mutex::default(),
        }
    }

    pub fn allow(&self, session: SessionId, now: Instant) -> bool {
        let mut buckets = self.buckets.lock();
        if buckets.len() > 10_000 {
            buckets.retain(|_, (_, last)| now.duration_since(*last) < Duration::from_secs(60));
        }
        let (tokens, last) = buckets.entry(session).or_insert((self.per_second, now));
        let refill = now.saturating_duration_since(*last).as_secs_f64() * self.per_second;
        *tokens = (*tokens + refill).min(self.per_second);
        *last = now;
        if *tokens >= 1.0 {
            *tokens -= 1.0;
            true
        } else {
            false
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn unauthorized(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", detail)
    }

    fn forbidden() -> Self {
        Self::new(StatusCode::FORBIDDEN, "forbidden", "viewer may not read this resource")
    }

    fn not_found(code: &'static str) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, code.replace('_', " "))
    }

    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, detail)
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        tracing::error!(%detail, "request failed");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownSession => ApiError::not_found("unknown_session"),
            StoreError::UnknownActivity => ApiError::not_found("unknown_activity"),
            StoreError::UnknownEvent => ApiError::not_found("unknown_event"),
            other => ApiError::internal(other),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/activities", get(list_activities))
        .route("/activities/{id}/sessions", post(launch).get(list_sessions))
        .route("/sessions/{sid}/events", post(ingest))
        .route("/activities/{id}/dashboard", get(dashboard))
        .route("/activities/{id}/users", get(users))
        .route("/activities/{id}/sessions/{sid}", get(session_detail))
        .route("/activities/{id}/sessions/{sid}/blobs/{seq}/{field}", get(session_blob))
        .route("/activities/{id}/summary/exercises", get(exercise_summary))
        .route("/activities/{id}/summary/timeline", get(timeline))
        .route("/activities/{id}/events", get(events_by_type))
        .route("/mylog/{token}", get(mylog))
        .route("/mylog/{token}/blobs/{seq}/{field}", get(mylog_blob))
        .layer(axum::extract::DefaultBodyLimit::max(
            state.service.limits().max_event_bytes.saturating_add(1),
        ));
    let api = match &state.console_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).not_found_service(ServeFile::new(dir.join("index.html")))),
        None => api.fallback(|| async { ApiError::not_found("not_found") }),
    };
    api.with_state(state)
}

#[derive(Debug, Deserialize)]
struct LaunchForm {
    user_ref: String,
    issued_at: String,
    nonce: String,
    origin: String,
    #[serde(default)]
    opt_out: Option<String>,
    signature: String,
}

#[derive(Debug, Serialize)]
struct LaunchResponse {
    session_id: SessionId,
    session_token: SessionToken,
    pseudonym: Pseudonym,
    opt_out: bool,
    events_url: String,
    mylog_url: String,
}

async fn launch(
    State(state): State<Arc<AppState>>,
    Path(activity_id): Path<String>,
    form: Result<Form<LaunchForm>, FormRejection>,
) -> ApiResult<(StatusCode, Json<LaunchResponse>)> {
    let Form(form) = form.map_err(|e| ApiError::bad_request("bad_form", e.body_text()))?;
    let issued_at = Timestamp::parse_iso(&form.issued_at)
        .ok_or_else(|| ApiError::bad_request("bad_form", "issued_at is not an ISO-8601 instant"))?;
    let opt_out = match form.opt_out.as_deref() {
        None | Some("false") => false,
        Some("true") => true,
        Some(_) => return Err(ApiError::bad_request("bad_form", "opt_out must be true or false")),
    };
    let req = LaunchRequest {
        activity_id,
        user_ref: form.user_ref,
        issued_at,
        nonce: form.nonce,
        origin: form.origin,
        opt_out,
        signature: form.signature,
    };
    let now = state.now();
    let service = state.service.clone();
    let session = tokio::task::spawn_blocking(move || service.launch(&req, now))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| match e {
            LaunchFailure::Rejected(e) => {
                let status = match e {
                    LaunchError::UnknownActivity => StatusCode::NOT_FOUND,
                    LaunchError::OriginNotWhitelisted => StatusCode::FORBIDDEN,
                    LaunchError::BadSignature | LaunchError::StaleTimestamp | LaunchError::ReplayedNonce => {
                        StatusCode::UNAUTHORIZED
                    }
                };
                ApiError::new(status, e.code(), e.to_string())
            }
            LaunchFailure::Store(e) => ApiError::internal(e),
        })?;
    Ok((
        StatusCode::CREATED,
        Json(LaunchResponse {
            session_id: session.session_id,
            session_token: session.token,
            pseudonym: session.pseudonym,
            opt_out: session.opt_out,
            events_url: format!("{}/sessions/{}/events", state.base_url, session.session_id),
            mylog_url: format!("{}/mylog/{}", state.base_url, session.token),
        }),
    ))
}

async fn ingest(State(state): State<Arc<AppState>>, Path(sid): Path<String>, body: Bytes) -> ApiResult<Response> {
    let sid: SessionId = sid.parse().map_err(|_| ApiError::not_found("unknown_session"))?;
    if state.service.store().session(&sid).is_none() {
        return Err(ApiError::not_found("unknown_session"));
    }
    if !state.rate.allow(sid, Instant::now()) {
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "rate_limited",
            "too many events for this session",
        ));
    }
    let now = state.now();
    let service = state.service.clone();
    let outcome = tokio::task::spawn_blocking(move || service.ingest(&sid, &body, now))
        .await
        .map_err(ApiError::internal)?;
    match outcome {
        Ok(AppendOutcome::Stored(e)) => Ok((StatusCode::CREATED, Json(json!({ "seq": e.seq }))).into_response()),
        Ok(AppendOutcome::Discarded) => Ok(StatusCode::NO_CONTENT.into_response()),
        Err(e) => {
            let status = match &e {
                IngestError::UnknownSession => StatusCode::NOT_FOUND,
                IngestError::BodyTooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
                IngestError::Invalid(v) if v.code() == "oversize" => StatusCode::PAYLOAD_TOO_LARGE,
                IngestError::Decode(_) | IngestError::Invalid(_) => StatusCode::BAD_REQUEST,
                IngestError::Store(_) => return Err(ApiError::internal(e)),
            };
            Err(ApiError::new(status, e.code(), e.to_string()))
        }
    }
}

fn viewer(state: &AppState, headers: &HeaderMap) -> ApiResult<Viewer> {
    let value = headers
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::unauthorized("missing bearer token"))?;
    let token = value
        .strip_prefix("Bearer ")
        .map(str::trim)
        .ok_or_else(|| ApiError::unauthorized("expected a bearer token"))?;
    if let Ok(session_token) = token.parse::<SessionToken>() {
        return Ok(Viewer::Session(session_token));
    }
    state
        .identity
        .verify(token, state.now())
        .map(Viewer::Identity)
        .map_err(|e| ApiError::unauthorized(e.to_string()))
}

fn activity<'a>(state: &'a AppState, activity_id: &str) -> ApiResult<&'a Arc<ActivityConfig>> {
    state
        .service
        .activity(activity_id)
        .ok_or_else(|| ApiError::not_found("unknown_activity"))
}

/// Activity-wide views are for teachers only.
fn require_teacher<'a>(
    state: &'a AppState,
    headers: &HeaderMap,
    activity_id: &str,
) -> ApiResult<&'a Arc<ActivityConfig>> {
    let viewer = viewer(state, headers)?;
    let cfg = activity(state, activity_id)?;
    match authorize(&viewer, cfg, &ResourceRef::Activity { activity_id }) {
        Role::Teacher => Ok(cfg),
        _ => Err(ApiError::forbidden()),
    }
}

/// A session of the activity that the viewer may read. Opt-out sessions are
/// not visible to teachers.
fn readable_session(state: &AppState, headers: &HeaderMap, activity_id: &str, sid: &str) -> ApiResult<Session> {
    let viewer = viewer(state, headers)?;
    let cfg = activity(state, activity_id)?;
    let store = state.service.store();
    // Decide what the viewer could possibly see before looking the id up.
    let candidate = match &viewer {
        Viewer::Identity(_) => {
            if authorize(&viewer, cfg, &ResourceRef::Activity { activity_id }) != Role::Teacher {
                return Err(ApiError::forbidden());
            }
            let sid: SessionId = sid.parse().map_err(|_| ApiError::not_found("unknown_session"))?;
            store.session(&sid).filter(|s| !s.opt_out)
        }
        Viewer::Session(token) => {
            let own = store.session_by_token(token).ok_or_else(ApiError::forbidden)?;
            if own.session_id.to_string() != sid {
                return Err(ApiError::forbidden());
            }
            Some(own)
        }
    };
    let session = candidate
        .filter(|s| s.activity_id == activity_id)
        .ok_or_else(|| ApiError::not_found("unknown_session"))?;
    let resource = ResourceRef::Session {
        activity_id,
        owner: &session.token,
    };
    match authorize(&viewer, cfg, &resource) {
        Role::Denied => Err(ApiError::forbidden()),
        _ => Ok(session),
    }
}

async fn list_activities(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Json<serde_json::Value>> {
    let Viewer::Identity(id) = viewer(&state, &headers)? else {
        return Err(ApiError::forbidden());
    };
    let mut list: Vec<_> = state
        .service
        .activities()
        .iter()
        .filter(|cfg| cfg.is_teacher(&id.principal))
        .map(|cfg| {
            json!({
                "activity_id": cfg.activity_id,
                "course_label": cfg.course_label,
                "exercise_order": cfg.exercise_order,
            })
        })
        .collect();
    list.sort_by(|a, b| a["activity_id"].as_str().cmp(&b["activity_id"].as_str()));
    Ok(Json(json!({ "principal": id.principal, "activities": list })))
}

async fn dashboard(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let cfg = require_teacher(&state, &headers, &id)?;
    Ok(Json(build_dashboard(state.service.store(), cfg, state.now())?))
}

async fn users(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    require_teacher(&state, &headers, &id)?;
    Ok(Json(json!({ "users": state.service.store().list_users(&id)? })))
}

#[derive(Debug, Deserialize)]
struct SessionsQuery {
    pseudonym: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

fn page(offset: Option<usize>, limit: Option<usize>) -> Page {
    Page::new(offset.unwrap_or(0), limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE))
}

async fn list_sessions(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SessionsQuery>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    require_teacher(&state, &headers, &id)?;
    let pseudonym = match q.pseudonym.as_deref() {
        Some(p) => {
            Some(Pseudonym::parse(p).ok_or_else(|| ApiError::bad_request("bad_query", "pseudonym must be 12 digits"))?)
        }
        None => None,
    };
    let sessions = state
        .service
        .store()
        .list_sessions(&id, pseudonym.as_ref(), page(q.offset, q.limit))?;
    Ok(Json(json!({ "sessions": sessions })))
}

#[derive(Debug, Deserialize)]
struct UntilQuery {
    until: Option<u64>,
}

fn wants_html(headers: &HeaderMap) -> bool {
    headers
        .get(ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|a| a.contains("text/html"))
}

async fn session_detail(
    State(state): State<Arc<AppState>>,
    Path((id, sid)): Path<(String, String)>,
    Query(q): Query<UntilQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    // Mail deep links open in a browser: hand them to the console, which
    // then calls this same URL for JSON with the teacher's token.
    if wants_html(&headers) {
        if let Some(dir) = &state.console_dir {
            if let Ok(index) = tokio::fs::read_to_string(dir.join("index.html")).await {
                return Ok(Html(index).into_response());
            }
        }
    }
    let session = readable_session(&state, &headers, &id, &sid)?;
    let blob_base = format!("/activities/{}/sessions/{}/blobs", id, session.session_id);
    let view = build_session_view(
        state.service.store(),
        &session.session_id,
        q.until,
        state.service.renderers(),
        &blob_base,
    )?;
    Ok(Json(view).into_response())
}

fn blob_response(state: &AppState, session: &Session, seq: u64, field: &str) -> ApiResult<Response> {
    let event = state.service.store().event(&session.session_id, seq)?;
    match event.envelope.field(field) {
        Some(FieldValue::Blob(blob)) => {
            let content_type =
                HeaderValue::from_str(&blob.media_type).unwrap_or(HeaderValue::from_static("application/octet-stream"));
            Ok((
                [
                    (CONTENT_TYPE, content_type),
                    (CACHE_CONTROL, HeaderValue::from_static("private, no-store")),
                ],
                blob.data.clone(),
            )
                .into_response())
        }
        _ => Err(ApiError::not_found("unknown_blob")),
    }
}

async fn session_blob(
    State(state): State<Arc<AppState>>,
    Path((id, sid, seq, field)): Path<(String, String, u64, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let session = readable_session(&state, &headers, &id, &sid)?;
    blob_response(&state, &session, seq, &field)
}

async fn exercise_summary(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    let cfg = require_teacher(&state, &headers, &id)?;
    Ok(Json(build_exercise_table(state.service.store(), cfg)?))
}

#[derive(Debug, Deserialize)]
struct TimelineQuery {
    bucket: Option<String>,
    from: Option<String>,
    to: Option<String>,
}

async fn timeline(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TimelineQuery>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    require_teacher(&state, &headers, &id)?;
    let bucket = Bucket::parse(q.bucket.as_deref().unwrap_or("day"))
        .ok_or_else(|| ApiError::bad_request("bad_query", "bucket must be hour, day or week"))?;
    let instant = |s: &Option<String>, default: Timestamp| match s {
        Some(s) => {
            Timestamp::parse_iso(s).ok_or_else(|| ApiError::bad_request("bad_query", "from/to must be ISO-8601"))
        }
        None => Ok(default),
    };
    let range = match (&q.from, &q.to) {
        (None, None) => None,
        _ => Some(
            TimeRange::new(instant(&q.from, Timestamp::MIN)?, instant(&q.to, Timestamp::MAX)?)
                .ok_or_else(|| ApiError::bad_request("bad_query", "from must not be after to"))?,
        ),
    };
    let buckets = build_timeline(state.service.store(), &id, bucket, range)?;
    Ok(Json(json!({ "bucket": bucket, "buckets": buckets })))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(rename = "type")]
    event_type: String,
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EventListItem {
    session_id: SessionId,
    pseudonym: Pseudonym,
    item: RenderedItem,
}

async fn events_by_type(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<impl IntoResponse> {
    require_teacher(&state, &headers, &id)?;
    if !is_valid_pattern(&q.event_type) {
        return Err(ApiError::bad_request(
            "bad_query",
            "type must be a token, optionally ending in .*",
        ));
    }
    let store = state.service.store();
    let events = store.events_by_type(&id, &q.event_type, page(q.offset, q.limit))?;
    let items = events
        .iter()
        .map(|e| {
            let session = store.session(&e.session_id).ok_or(StoreError::UnknownSession)?;
            let blob_base = format!("/activities/{}/sessions/{}/blobs", id, e.session_id);
            Ok(EventListItem {
                session_id: e.session_id,
                pseudonym: session.pseudonym,
                item: render_item(e, state.service.renderers(), &blob_base),
            })
        })
        .collect::<Result<Vec<_>, StoreError>>()?;
    Ok(Json(json!({ "events": items })))
}

fn own_session(state: &AppState, token: &str) -> ApiResult<Session> {
    let token: SessionToken = token.parse().map_err(|_| ApiError::not_found("unknown_session"))?;
    state
        .service
        .store()
        .session_by_token(&token)
        .ok_or_else(|| ApiError::not_found("unknown_session"))
}

async fn mylog(
    State(state): State<Arc<AppState>>,
    Path(token): Path<String>,
    Query(q): Query<UntilQuery>,
) -> ApiResult<impl IntoResponse> {
    let session = own_session(&state, &token)?;
    let blob_base = format!("/mylog/{}/blobs", session.token);
    Ok(Json(build_session_view(
        state.service.store(),
        &session.session_id,
        q.until,
        state.service.renderers(),
        &blob_base,
    )?))
}

async fn mylog_blob(
    State(state): State<Arc<AppState>>,
    Path((token, seq, field)): Path<(String, u64, String)>,
) -> ApiResult<Response> {
    let session = own_session(&state, &token)?;
    blob_response(&state, &session, seq, &field)
}
