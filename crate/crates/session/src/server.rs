//! HTTP and WebSocket front end over a [`SessionStore`].
//!
//! - `POST /sessions` creates a session from a [`CreateSession`] body.
//! - `GET /sessions/{id}` describes it.
//! - `GET /sessions/{id}/metrics` returns metrics rows, as CSV when the
//!   `Accept` header asks for `text/csv` and JSON otherwise.
//! - `GET /healthz` answers `ok`.
//! - `GET /ws` upgrades to the message protocol; the first frame must be `hello`.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hirl_core::experiment::results_to_csv;

use crate::protocol::{Ack, Demo, EpisodeEnd, ErrorPayload, ProgressPayload, ProtocolMessage};
use crate::store::{CreateSession, ExpertKind, SessionError, SessionPhase, SessionStore};

struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

fn status_of(e: &SessionError) -> StatusCode {
    match e {
        SessionError::NotFound(_) => StatusCode::NOT_FOUND,
        SessionError::UnknownAlgorithm(_) | SessionError::InvalidConfig(_) | SessionError::OutOfBounds(..) => {
            StatusCode::BAD_REQUEST
        }
        SessionError::NotAwaiting(_)
        | SessionError::StaleQuery { .. }
        | SessionError::Finished
        | SessionError::WrongExpert(_) => StatusCode::CONFLICT,
        SessionError::Training(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(status: StatusCode, payload: ErrorPayload) -> Response {
    (status, Json(ProtocolMessage::Error(payload))).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        error_response(status_of(&self.0), self.0.to_payload(None))
    }
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/metrics", get(session_metrics))
        .route("/ws", get(upgrade))
        .with_state(store)
}

pub async fn serve(listener: tokio::net::TcpListener, store: Arc<SessionStore>) -> std::io::Result<()> {
    axum::serve(listener, router(store)).await
}

/// Runs a store operation off the async executor.
async fn blocking<R, F>(store: &Arc<SessionStore>, f: F) -> R
where
    R: Send + 'static,
    F: FnOnce(&SessionStore) -> R + Send + 'static,
{
    let store = store.clone();
    tokio::task::spawn_blocking(move || f(&store)).await.expect("session task panicked")
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> Response {
    let req: CreateSession = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let payload = ErrorPayload {
                session_id: None,
                code: "bad_request".into(),
                message: e.to_string(),
                current_query_id: None,
            };
            return error_response(StatusCode::BAD_REQUEST, payload);
        }
    };
    let expert = req.expert;
    let created = blocking(&store, move |s| s.create_session(&req).and_then(|id| s.info(&id))).await;
    match created {
        Ok(info) => {
            if expert == ExpertKind::Oracle {
                let id = info.session_id.clone();
                let store = store.clone();
                tokio::task::spawn_blocking(move || {
                    if let Err(e) = store.run_oracle(&id) {
                        log::error!("oracle session {id} stopped: {e}");
                    }
                });
            }
            (StatusCode::CREATED, Json(info)).into_response()
        }
        Err(e) => ApiError(e).into_response(),
    }
}

async fn session_info(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(store.info(&id)?).into_response())
}

async fn session_metrics(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let rows = store.session_metrics(&id)?;
    let wants_csv = headers.get(header::ACCEPT).and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("text/csv"));
    Ok(if wants_csv {
        ([(header::CONTENT_TYPE, "text/csv")], results_to_csv(&rows)).into_response()
    } else {
        Json(rows).into_response()
    })
}

async fn upgrade(State(store): State<Arc<SessionStore>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| handle_socket(socket, store))
}

fn protocol_error(session_id: Option<&str>, code: &str, message: impl Into<String>) -> ProtocolMessage {
    ProtocolMessage::Error(ErrorPayload {
        session_id: session_id.map(str::to_string),
        code: code.into(),
        message: message.into(),
        current_query_id: None,
    })
}

async fn handle_socket(mut socket: WebSocket, store: Arc<SessionStore>) {
    let mut bound: Option<String> = None;
    let period = (store.timeout() / 4).clamp(Duration::from_millis(10), Duration::from_secs(1));
    let mut tick = tokio::time::interval(period);
    loop {
        let out = tokio::select! {
            frame = socket.recv() => match frame {
                Some(Ok(Message::Text(text))) => on_frame(&store, &mut bound, text.as_bytes()).await,
                Some(Ok(Message::Binary(bytes))) => on_frame(&store, &mut bound, &bytes).await,
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => continue,
            },
            _ = tick.tick(), if bound.is_some() => {
                let id = bound.clone().expect("guarded");
                blocking(&store, move |s| on_tick(s, &id)).await
            }
        };
        for m in out {
            if socket.send(Message::Text(m.to_json().into())).await.is_err() {
                return;
            }
        }
    }
}

async fn on_frame(store: &Arc<SessionStore>, bound: &mut Option<String>, bytes: &[u8]) -> Vec<ProtocolMessage> {
    let msg = match ProtocolMessage::from_bytes(bytes) {
        Ok(m) => m,
        Err(e) => return vec![protocol_error(bound.as_deref(), "bad_message", e.to_string())],
    };
    match msg {
        ProtocolMessage::Hello { session_id } => {
            let id = session_id.clone();
            let out = blocking(store, move |s| on_hello(s, &id)).await;
            if !matches!(out.first(), Some(ProtocolMessage::Error(_))) {
                *bound = Some(session_id);
            }
            out
        }
        ProtocolMessage::Demo(demo) => {
            if bound.as_deref() != Some(demo.session_id.as_str()) {
                return vec![protocol_error(Some(&demo.session_id), "unbound", "send hello for this session first")];
            }
            blocking(store, move |s| on_demo(s, demo)).await
        }
        other => {
            vec![protocol_error(bound.as_deref(), "unexpected_message", format!("clients may not send {other:?}"))]
        }
    }
}

fn error_message(id: &str, e: &SessionError) -> ProtocolMessage {
    ProtocolMessage::Error(e.to_payload(Some(id)))
}

fn query_message(store: &SessionStore, id: &str) -> ProtocolMessage {
    match store.next_query(id) {
        Ok(q) => ProtocolMessage::Query(q),
        Err(e) => error_message(id, &e),
    }
}

/// Advances past finished episodes, reporting each, until a query is pending
/// or the session ends.
fn advance_messages(store: &SessionStore, id: &str) -> Vec<ProtocolMessage> {
    let mut out = Vec::new();
    let mut report_last = false;
    loop {
        let progress = match store.advance_training(id) {
            Ok(p) => p,
            Err(e) => {
                out.push(error_message(id, &e));
                return out;
            }
        };
        if report_last {
            if let Some(r) = store.results(id).ok().and_then(|rs| rs.last().copied()) {
                out.push(ProtocolMessage::EpisodeEnd(EpisodeEnd::new(id, &r)));
            }
        }
        let phase = store.phase(id).unwrap_or(SessionPhase::Finished);
        out.push(ProtocolMessage::Progress(ProgressPayload::new(id, progress, phase == SessionPhase::Finished)));
        match phase {
            SessionPhase::AwaitingDemo => {
                out.push(query_message(store, id));
                return out;
            }
            SessionPhase::Finished => return out,
            // The next episode started inside its goal.
            SessionPhase::EpisodeDone => report_last = true,
        }
    }
}

/// Messages describing where a session stands, for a client (re)connecting.
fn state_messages(store: &SessionStore, id: &str) -> Vec<ProtocolMessage> {
    let (phase, expert) = match store.with_session(id, |s| (s.phase(), s.expert())) {
        Ok(v) => v,
        Err(e) => return vec![error_message(id, &e)],
    };
    match (expert, phase) {
        (ExpertKind::Human, SessionPhase::AwaitingDemo) => vec![query_message(store, id)],
        (ExpertKind::Human, SessionPhase::EpisodeDone) => advance_messages(store, id),
        _ => match store.progress(id) {
            Ok(p) => vec![ProtocolMessage::Progress(ProgressPayload::new(id, p, phase == SessionPhase::Finished))],
            Err(e) => vec![error_message(id, &e)],
        },
    }
}

fn on_hello(store: &SessionStore, id: &str) -> Vec<ProtocolMessage> {
    match store.info(id) {
        Ok(info) => {
            let mut out = vec![ProtocolMessage::Ack(Ack {
                session_id: id.to_string(),
                query_id: None,
                offset: None,
                session: Some(info),
            })];
            out.extend(on_tick(store, id));
            if out.len() == 1 {
                out.extend(state_messages(store, id));
            }
            out
        }
        Err(e) => vec![error_message(id, &e)],
    }
}

/// Aborts a timed-out episode and moves on to the next query.
fn on_tick(store: &SessionStore, id: &str) -> Vec<ProtocolMessage> {
    match store.expire_stale(id) {
        Ok(Some(r)) => {
            let mut out = vec![ProtocolMessage::EpisodeEnd(EpisodeEnd::new(id, &r))];
            out.extend(advance_messages(store, id));
            out
        }
        Ok(None) => Vec::new(),
        Err(e) => vec![error_message(id, &e)],
    }
}

fn on_demo(store: &SessionStore, demo: Demo) -> Vec<ProtocolMessage> {
    let id = demo.session_id.as_str();
    let expired = on_tick(store, id);
    let mut out = Vec::new();
    match store.submit_demonstration(id, demo.query_id, demo.subgoal) {
        Ok(ack) => {
            out.push(ProtocolMessage::Ack(Ack {
                session_id: id.to_string(),
                query_id: Some(ack.query_id),
                offset: Some(ack.offset),
                session: None,
            }));
            match ack.ended {
                Some(r) => {
                    out.push(ProtocolMessage::EpisodeEnd(EpisodeEnd::new(id, &r)));
                    out.extend(advance_messages(store, id));
                }
                None => out.push(query_message(store, id)),
            }
        }
        Err(e) => out.push(error_message(id, &e)),
    }
    out.extend(expired);
    out
}
