//! HTTP and server-sent event interface.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use ops_core::control::wire;
use ops_core::knowledge::{EntryDraft, KnowledgeError};
use ops_core::react::SessionLimits;
use ops_core::relay::{RelayError, ReplyOutcome};
use ops_core::tools::GateError;
use serde::Deserialize;
use serde_json::{json, Value as Json_};
use tokio::sync::broadcast::error::RecvError;

use crate::app::{App, SessionOptions};
use crate::sessions::{Numbered, SessionEvent};

pub struct ApiError(StatusCode, &'static str, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1, "message": self.2 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn unknown_session(id: &str) -> ApiError {
    ApiError(
        StatusCode::NOT_FOUND,
        "UnknownSession",
        format!("no session '{id}'"),
    )
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(session_events))
        .route("/writes", get(list_writes))
        .route("/writes/{id}/resolve", post(resolve_write))
        .route("/machine/snapshot", get(snapshot))
        .route("/machine", post(machine_request))
        .route("/logbook", get(search_logbook).post(post_logbook))
        .route("/relay/reply", post(relay_reply))
        .route("/relay/queries", get(relay_queries))
        .with_state(app)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    task: String,
    #[serde(default)]
    show_cot: bool,
    #[serde(default)]
    auto_approve: bool,
    #[serde(default)]
    limits: Option<SessionLimits>,
}

async fn create_session(
    State(app): State<Arc<App>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<impl IntoResponse> {
    if req.task.trim().is_empty() {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            "EmptyTask",
            "task must not be empty".into(),
        ));
    }
    if req.auto_approve && !app.config.approval.allow_auto_approve {
        return Err(ApiError(
            StatusCode::FORBIDDEN,
            "AutoApproveDisabled",
            "auto_approve is a test mode; enable approval.allow_auto_approve to use it".into(),
        ));
    }
    if req.limits.is_some_and(|l| !l.is_valid()) {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            "InvalidLimits",
            "limits must all be positive".into(),
        ));
    }
    let opts = SessionOptions {
        show_cot: req.show_cot,
        auto_approve: req.auto_approve,
        limits: req.limits,
    };
    let id = app.spawn_session(&req.task, &opts);
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn list_sessions(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.sessions.list())
}

#[derive(Deserialize, Default)]
struct Visibility {
    #[serde(default)]
    privileged: bool,
}

async fn get_session(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(v): Query<Visibility>,
) -> ApiResult<impl IntoResponse> {
    let rec = app.sessions.get(&id).ok_or_else(|| unknown_session(&id))?;
    Ok(Json(rec.visible(v.privileged)))
}

fn to_sse(n: &Numbered) -> Event {
    Event::default()
        .id(n.seq.to_string())
        .event(n.event.name())
        .data(serde_json::to_string(n).expect("event serializes"))
}

/// Backlog first, then live events until the session's `done` event.
fn event_stream(
    app: &App,
    id: &str,
    privileged: bool,
) -> Option<impl Stream<Item = Result<Event, Infallible>>> {
    let rec = app.sessions.get(id)?;
    let sub = app.sessions.subscribe(id)?;
    let privileged = privileged || rec.show_cot;
    let backlog_done = sub
        .backlog
        .iter()
        .any(|n| matches!(n.event, SessionEvent::Done { .. }));
    let backlog = stream::iter(sub.backlog);
    let live = stream::unfold((sub.live, backlog_done), |(rx, done)| async move {
        if done {
            return None;
        }
        let mut rx = rx?;
        match rx.recv().await {
            Ok(n) => {
                let finished = matches!(n.event, SessionEvent::Done { .. });
                Some((n, (Some(rx), finished)))
            }
            Err(RecvError::Lagged(_)) | Err(RecvError::Closed) => None,
        }
    });
    Some(
        backlog
            .chain(live)
            .filter(move |n| futures::future::ready(n.event.visible_to(privileged)))
            .map(|n| Ok(to_sse(&n))),
    )
}

async fn session_events(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Query(v): Query<Visibility>,
) -> ApiResult<impl IntoResponse> {
    let s = event_stream(&app, &id, v.privileged).ok_or_else(|| unknown_session(&id))?;
    Ok(Sse::new(s).keep_alive(KeepAlive::default()))
}

async fn list_writes(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.env.gate.list())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Resolve {
    approve: bool,
}

async fn resolve_write(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    Json(req): Json<Resolve>,
) -> ApiResult<impl IntoResponse> {
    let gate = app.env.gate.clone();
    let res = tokio::task::spawn_blocking(move || gate.resolve(&id, req.approve))
        .await
        .expect("resolve task");
    match res {
        Ok(w) => Ok(Json(w)),
        Err(e @ GateError::UnknownPendingWrite(_)) => Err(ApiError(
            StatusCode::NOT_FOUND,
            "UnknownPendingWrite",
            e.to_string(),
        )),
        Err(e @ GateError::AlreadyResolved(_)) => Err(ApiError(
            StatusCode::CONFLICT,
            "AlreadyResolved",
            e.to_string(),
        )),
    }
}

async fn snapshot(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.env.machine.snapshot())
}

async fn machine_request(State(app): State<Arc<App>>, body: String) -> impl IntoResponse {
    let machine = app.env.machine.clone();
    let out = tokio::task::spawn_blocking(move || wire::handle_line(&machine, &body))
        .await
        .expect("machine task");
    Json(out)
}

#[derive(Deserialize)]
struct LogbookQuery {
    q: Option<String>,
    k: Option<usize>,
    since: Option<i64>,
}

async fn search_logbook(
    State(app): State<Arc<App>>,
    Query(q): Query<LogbookQuery>,
) -> impl IntoResponse {
    let log = &app.env.logbook;
    match q.q.filter(|s| !s.trim().is_empty()) {
        Some(query) => {
            let hits: Vec<Json_> = log
                .search(&query, q.k.unwrap_or(10).max(1), q.since)
                .into_iter()
                .filter_map(|h| {
                    log.get(h.id)
                        .map(|e| json!({ "id": h.id, "score": h.score, "entry": e }))
                })
                .collect();
            Json(json!({ "hits": hits }))
        }
        None => {
            let mut entries = log.entries();
            if let Some(t) = q.since {
                entries.retain(|e| e.timestamp >= t);
            }
            entries.reverse();
            entries.truncate(q.k.unwrap_or(usize::MAX));
            Json(json!({ "entries": entries }))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewEntry {
    title: String,
    body: String,
    #[serde(default)]
    author: Option<String>,
    #[serde(default)]
    tags: Vec<String>,
}

async fn post_logbook(
    State(app): State<Arc<App>>,
    Json(req): Json<NewEntry>,
) -> ApiResult<impl IntoResponse> {
    let draft = EntryDraft {
        timestamp: app.env.now_utc(),
        author: req.author.unwrap_or_else(|| "operator".into()),
        title: req.title,
        body: req.body,
        tags: req.tags,
    };
    match app.env.logbook.post_entry(draft) {
        Ok(id) => Ok((StatusCode::CREATED, Json(json!({ "id": id })))),
        Err(e @ (KnowledgeError::EmptyBody | KnowledgeError::EmptyTitle)) => {
            let code = if matches!(e, KnowledgeError::EmptyBody) {
                "EmptyBody"
            } else {
                "EmptyTitle"
            };
            Err(ApiError(StatusCode::BAD_REQUEST, code, e.to_string()))
        }
        Err(e) => Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            "StoreError",
            e.to_string(),
        )),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    query_id: String,
    text: String,
}

async fn relay_reply(
    State(app): State<Arc<App>>,
    Json(req): Json<Reply>,
) -> ApiResult<impl IntoResponse> {
    match app.env.relay.reply(&req.query_id, &req.text) {
        Ok(ReplyOutcome::Accepted) => Ok(Json(json!({ "outcome": "accepted" }))),
        Ok(ReplyOutcome::Discarded) => Ok(Json(json!({ "outcome": "discarded" }))),
        Err(e @ RelayError::UnknownQuery(_)) => Err(ApiError(
            StatusCode::NOT_FOUND,
            "UnknownQuery",
            e.to_string(),
        )),
        Err(e) => Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            "RelayError",
            e.to_string(),
        )),
    }
}

async fn relay_queries(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.env.relay.queries())
}
