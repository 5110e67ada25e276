//! JSON over HTTP plus a per-session WebSocket event stream.

use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast;

use crate::service::{Gateway, GatewayError};

/// How often each WebSocket gets a telemetry frame.
pub const TELEMETRY_PERIOD: Duration = Duration::from_millis(500);

pub fn router(gateway: Gateway) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/task", post(submit_task))
        .route("/sessions/{id}/approve", post(approve))
        .route("/sessions/{id}/reject", post(reject))
        .route("/sessions/{id}/abort", post(abort))
        .route("/sessions/{id}/events", get(events))
        .route("/fleet", get(fleet))
        .route("/fleet/reconnect", post(reconnect))
        .with_state(gateway)
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, body) = match self {
            GatewayError::UnknownSession(_) => (StatusCode::NOT_FOUND, json!({ "error": "unknown_session" })),
            GatewayError::BusySession => (StatusCode::CONFLICT, json!({ "error": "busy_session" })),
            GatewayError::FleetBusy => (StatusCode::CONFLICT, json!({ "error": "fleet_busy" })),
            GatewayError::NoPendingPlan => (StatusCode::CONFLICT, json!({ "error": "no_pending_plan" })),
            GatewayError::FleetNotReady(ids) => {
                (StatusCode::CONFLICT, json!({ "error": "fleet_not_ready", "offline": ids }))
            }
            GatewayError::NoExecution => (StatusCode::CONFLICT, json!({ "error": "no_execution" })),
            GatewayError::EmptyTask => (StatusCode::BAD_REQUEST, json!({ "error": "empty_task" })),
            GatewayError::Planning(f) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "planning_failed", "stage": f.stage, "errors": f.details, "replies": f.replies }),
            ),
            GatewayError::Exec(_) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "execution" })),
        };
        let mut body = body;
        body["message"] = message.into();
        (status, Json(body)).into_response()
    }
}

async fn create_session(State(gw): State<Gateway>) -> impl IntoResponse {
    (StatusCode::CREATED, Json(json!({ "session_id": gw.create_session() })))
}

async fn session_info(State(gw): State<Gateway>, Path(id): Path<String>) -> Result<Response, GatewayError> {
    Ok(Json(gw.session_info(&id).await?).into_response())
}

#[derive(Deserialize)]
struct TaskBody {
    text: String,
}

async fn submit_task(
    State(gw): State<Gateway>,
    Path(id): Path<String>,
    Json(body): Json<TaskBody>,
) -> Result<Response, GatewayError> {
    Ok(Json(gw.submit_task(&id, &body.text).await?).into_response())
}

async fn approve(State(gw): State<Gateway>, Path(id): Path<String>) -> Result<Response, GatewayError> {
    let execution_id = gw.approve(&id).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "execution_id": execution_id }))).into_response())
}

#[derive(Deserialize, Default)]
struct RejectBody {
    feedback: Option<String>,
}

async fn reject(
    State(gw): State<Gateway>,
    Path(id): Path<String>,
    body: Option<Json<RejectBody>>,
) -> Result<Response, GatewayError> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    gw.reject(&id, body.feedback.as_deref()).await?;
    Ok(Json(json!({ "rejected": true })).into_response())
}

async fn abort(State(gw): State<Gateway>, Path(id): Path<String>) -> Result<Response, GatewayError> {
    let execution_id = gw.abort(&id)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "execution_id": execution_id, "abort_requested": true }))).into_response())
}

async fn fleet(State(gw): State<Gateway>) -> impl IntoResponse {
    Json(gw.fleet_status())
}

async fn reconnect(State(gw): State<Gateway>) -> impl IntoResponse {
    Json(gw.reconnect().await)
}

async fn events(State(gw): State<Gateway>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Result<Response, GatewayError> {
    let frames = gw.subscribe(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_frames(gw, socket, frames)))
}

async fn stream_frames(gw: Gateway, mut socket: WebSocket, mut frames: broadcast::Receiver<crate::service::Frame>) {
    let mut telemetry = tokio::time::interval(TELEMETRY_PERIOD);
    loop {
        let text = tokio::select! {
            frame = frames.recv() => match frame {
                Ok(frame) => serde_json::to_string(&frame).expect("frame serializes"),
                Err(broadcast::error::RecvError::Lagged(n)) => json!({ "type": "lagged", "skipped": n }).to_string(),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            _ = telemetry.tick() => {
                let frame = crate::service::Frame::Telemetry { drones: gw.fleet_status() };
                serde_json::to_string(&frame).expect("frame serializes")
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
        };
        if socket.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
}
