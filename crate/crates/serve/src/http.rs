//! HTTP routes and the WebSocket step stream.

use crate::protocol::{ClientMessage, ServerMessage};
use crate::service::{ServeError, Service};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::sync::Arc;
use std::time::Instant;

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match self {
            ServeError::UnknownMesh(_) | ServeError::UnknownModel(_) | ServeError::UnknownSession(_) => {
                StatusCode::NOT_FOUND
            }
            ServeError::InvalidRequest(_) | ServeError::OutsideDomain { .. } => StatusCode::BAD_REQUEST,
            ServeError::Poisoned => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub mesh: String,
    pub model: String,
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/meshes", get(list_meshes))
        .route("/mesh/{id}", get(mesh_bytes))
        .route("/mesh/{id}/meta", get(mesh_meta))
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/reset", post(reset_session))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(service)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    service: Arc<Service>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn list_meshes(State(s): State<Arc<Service>>) -> Json<serde_json::Value> {
    let list: Vec<_> = s
        .registry()
        .meshes()
        .map(|m| {
            json!({
                "id": m.id,
                "n_vertices": m.mesh.n_vertices(),
                "n_tets": m.mesh.tets.len(),
                "n_surface_faces": m.surface.n_faces(),
                "n_domain_faces": m.domain.len(),
            })
        })
        .collect();
    Json(json!(list))
}

async fn mesh_bytes(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServeError> {
    let m = s.registry().mesh(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], m.bytes.clone()).into_response())
}

async fn mesh_meta(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ServeError> {
    let m = s.registry().mesh(&id)?;
    let mut meta = serde_json::to_value(&m.sidecar).map_err(|e| ServeError::InvalidRequest(e.to_string()))?;
    meta["collision_domain"] = json!(m.domain.face_ids);
    Ok(Json(meta))
}

async fn list_models(State(s): State<Arc<Service>>) -> Json<serde_json::Value> {
    let list: Vec<_> = s
        .registry()
        .models()
        .map(|m| {
            json!({
                "id": m.id,
                "config": m.model.config,
                "param_count": m.model.param_count(),
                "meta": m.meta,
            })
        })
        .collect();
    Json(json!(list))
}

async fn create_session(State(s): State<Arc<Service>>, Json(req): Json<CreateSession>) -> Result<Response, ServeError> {
    let info = s.create_session(&req.mesh, &req.model)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn reset_session(State(s): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<serde_json::Value>, ServeError> {
    s.reset(&id).await?;
    Ok(Json(json!({ "id": id, "step": 0 })))
}

async fn stream(State(s): State<Arc<Service>>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Result<Response, ServeError> {
    s.stats(&id)?;
    Ok(ws.on_upgrade(move |socket| handle_stream(s, id, socket)))
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("server messages serialise").into())
}

fn error_message(e: &ServeError) -> Message {
    text(&ServerMessage::Error {
        message: e.to_string(),
        poisoned: matches!(e, ServeError::Poisoned),
    })
}

/// Messages on one connection are handled strictly in order.
async fn handle_stream(s: Arc<Service>, id: String, mut socket: WebSocket) {
    while let Some(Ok(msg)) = socket.recv().await {
        let reply = match msg {
            Message::Text(t) => match serde_json::from_str::<ClientMessage>(&t) {
                Ok(ClientMessage::Step(req)) => match s.step(&id, req).await {
                    Ok(frame) => {
                        let t0 = Instant::now();
                        let bytes = frame.encode();
                        s.note_serialization(&id, t0.elapsed().as_secs_f64() * 1e3);
                        Message::Binary(bytes.into())
                    }
                    Err(e) => error_message(&e),
                },
                Ok(ClientMessage::Reset) => match s.reset(&id).await {
                    Ok(()) => text(&ServerMessage::Reset { step: 0 }),
                    Err(e) => error_message(&e),
                },
                Ok(ClientMessage::Stats) => match s.stats(&id) {
                    Ok(st) => text(&ServerMessage::Stats(st)),
                    Err(e) => error_message(&e),
                },
                Err(e) => error_message(&ServeError::InvalidRequest(e.to_string())),
            },
            Message::Close(_) => break,
            _ => continue,
        };
        if socket.send(reply).await.is_err() {
            break;
        }
    }
}
