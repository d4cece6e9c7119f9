//! HTTP surface. Every JSON body carries `"v": 1`.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/v1/health` | liveness |
//! | GET | `/v1/tasks`, `/v1/scenarios` | registry listings |
//! | GET, POST | `/v1/sessions` | list, create (201) |
//! | GET, DELETE | `/v1/sessions/{id}` | describe, close |
//! | POST | `/v1/sessions/{id}/instructions` | `{text}` or `{audio}`, 202 |
//! | GET | `/v1/sessions/{id}/events` | SSE from `?from=` or `Last-Event-ID`; `?follow=false` for JSON |
//! | GET | `/v1/sessions/{id}/log` | history as JSONL, identical to the persisted file |
//! | GET | `/v1/sessions/{id}/scene` | latest snapshot |

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tabletop_core::events::{SessionEvent, EVENT_SCHEMA_VERSION};
use tabletop_core::speech::decode_pcm16le;

use crate::session::{CreateRequest, Service, ServiceError, Session};

const V: u32 = EVENT_SCHEMA_VERSION;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match &self.0 {
            ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) | ServiceError::NoAsr => StatusCode::BAD_REQUEST,
            ServiceError::NoSpeech => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Capacity(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Busy(_) => StatusCode::CONFLICT,
            ServiceError::Closed => StatusCode::GONE,
            ServiceError::Speech(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match &self.0 {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Capacity(_) => "capacity",
            ServiceError::Busy(_) => "busy",
            ServiceError::Closed => "closed",
            ServiceError::NoAsr => "no_asr",
            ServiceError::NoSpeech => "no_speech",
            ServiceError::Speech(_) => "asr_failed",
            ServiceError::Log(_) => "log",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"v": V, "error": {"code": self.code(), "message": self.0.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError(ServiceError::Invalid(msg.into()))
}

/// Parses a JSON body ourselves so malformed input gets the common error shape.
fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| invalid(e.to_string()))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"v": V, "status": "ok"})) }))
        .route("/v1/tasks", get(tasks))
        .route("/v1/scenarios", get(scenarios))
        .route("/v1/sessions", get(list_sessions).post(create_session))
        .route("/v1/sessions/{id}", get(describe).delete(close_session))
        .route("/v1/sessions/{id}/instructions", post(submit))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/sessions/{id}/log", get(jsonl))
        .route("/v1/sessions/{id}/scene", get(scene))
        .with_state(service)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

async fn tasks(State(s): State<Arc<Service>>) -> Json<Value> {
    let tasks: Vec<Value> = s
        .registry()
        .tasks
        .iter()
        .map(|t| {
            json!({
                "id": t.id,
                "scenario": t.scene,
                "category": t.category,
                "prompted": t.prompted,
                "sim": t.is_sim(),
                "instruction": t.instruction,
                "goal_state": t.goal_state,
            })
        })
        .collect();
    Json(json!({"v": V, "tasks": tasks}))
}

async fn scenarios(State(s): State<Arc<Service>>) -> Json<Value> {
    let list: Vec<Value> = s
        .registry()
        .scenarios
        .iter()
        .map(|(key, d)| json!({"key": key, "title": d.title, "objects": d.objects, "containers": d.containers}))
        .collect();
    Json(json!({"v": V, "scenarios": list}))
}

async fn list_sessions(State(s): State<Arc<Service>>) -> Json<Value> {
    Json(json!({"v": V, "sessions": s.list()}))
}

fn describe_json(session: &Session) -> Value {
    let mut d = serde_json::to_value(session.descriptor()).expect("descriptors serialize");
    d["v"] = json!(V);
    d
}

async fn create_session(State(s): State<Arc<Service>>, body: axum::body::Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateRequest = if body.is_empty() { parse_body(b"{}")? } else { parse_body(&body)? };
    let session = s.create(&req)?;
    Ok((StatusCode::CREATED, Json(describe_json(&session))))
}

async fn describe(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = s.get(&id)?;
    Ok(Json(describe_json(&session)))
}

async fn close_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let d = s.close(&id)?;
    let mut v = serde_json::to_value(d).expect("descriptors serialize");
    v["v"] = json!(V);
    Ok(Json(v))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AudioSegment {
    sample_rate: u32,
    pcm16le_base64: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    audio: Option<AudioSegment>,
}

async fn submit(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let sub: Submission = parse_body(&body)?;
    s.check_ready(&id)?;
    let (text, spoken) = match (sub.text, sub.audio) {
        (Some(t), None) if !t.trim().is_empty() => (t, false),
        (Some(_), None) => return Err(invalid("instruction text is empty")),
        (None, Some(a)) => {
            let bytes = STANDARD
                .decode(a.pcm16le_base64.as_bytes())
                .map_err(|e| invalid(format!("pcm16le_base64: {e}")))?;
            let samples = decode_pcm16le(&bytes).map_err(|e| invalid(e.to_string()))?;
            let svc = s.clone();
            let text = tokio::task::spawn_blocking(move || svc.transcribe(&samples, a.sample_rate))
                .await
                .map_err(|e| invalid(e.to_string()))??;
            (text, true)
        }
        _ => return Err(invalid("exactly one of `text` and `audio` is required")),
    };
    let (session, from) = s.begin(&id)?;
    let svc = s.clone();
    let t = text.clone();
    tokio::task::spawn_blocking(move || svc.run(&session, &t, spoken));
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"v": V, "accepted": true, "session": id, "text": text, "from_seq": from})),
    ))
}

#[derive(Deserialize)]
struct EventsQuery {
    from: Option<u64>,
    follow: Option<bool>,
}

fn sse_event(e: &SessionEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.body.kind())
        .data(e.to_json_line())
}

/// History from `from`, then live events until the session closes. Each
/// batch is read from the log after the head is marked seen, so no append
/// can slip between a read and the wait.
pub fn live_events(session: Arc<Session>, from: u64) -> impl Stream<Item = SessionEvent> {
    let rx = session.log.subscribe();
    stream::unfold(
        (session, rx, from, Vec::<SessionEvent>::new().into_iter()),
        |(session, mut rx, mut next, mut buf)| async move {
            loop {
                if let Some(e) = buf.next() {
                    next = e.seq + 1;
                    return Some((e, (session, rx, next, buf)));
                }
                let head = *rx.borrow_and_update();
                let batch = session.log.since(next);
                if !batch.is_empty() {
                    buf = batch.into_iter();
                    continue;
                }
                if head.closed || rx.changed().await.is_err() {
                    return None;
                }
            }
        },
    )
}

fn start_seq(q: &EventsQuery, headers: &HeaderMap) -> ApiResult<u64> {
    if let Some(h) = headers.get("last-event-id") {
        let last: u64 = h
            .to_str()
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| invalid("Last-Event-ID must be a sequence number"))?;
        return Ok(last + 1);
    }
    Ok(q.from.unwrap_or(1).max(1))
}

async fn events(
    State(s): State<Arc<Service>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let session = s.get(&id)?;
    let from = start_seq(&q, &headers)?;
    if q.follow == Some(false) {
        return Ok(Json(json!({"v": V, "events": session.log.since(from)})).into_response());
    }
    let stream = live_events(session, from).map(|e| Ok::<_, Infallible>(sse_event(&e)));
    let sse = Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)));
    Ok(sse.into_response())
}

async fn jsonl(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = s.get(&id)?;
    let mut body = String::new();
    for e in session.log.since(1) {
        body.push_str(&e.to_json_line());
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn scene(State(s): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = s.get(&id)?;
    let (seq, scene) = session.snapshot();
    Ok(Json(json!({"v": V, "seq": seq, "scene": scene})))
}
