//! Operator API over simulated or live clusters.
//!
//! ```text
//! POST   /clusters                          create (body: ClusterSpec)
//! GET    /clusters                          list ids
//! POST   /clusters/{id}/txns                submit (body: TxnRequest)
//! POST   /clusters/{id}/nodes/{node}/crash  node is "<chain>.<node>"
//! POST   /clusters/{id}/nodes/{node}/restart
//! GET    /clusters/{id}/state
//! DELETE /clusters/{id}
//! GET    /clusters/{id}/events[?from=N]     websocket, one JSON event per text frame
//! ```

pub mod cluster;
pub mod spec;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cbt_core::{NodeId, TxnId};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, RwLock};

pub use cluster::{ClusterHandle, ClusterState, NodeState, StreamEvent, TxnState, TxnStatus};
pub use spec::{ClusterSpec, TransportKind, TxnRequest};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("cluster has stopped")]
    Gone,
}

impl IntoResponse for ControlError {
    fn into_response(self) -> Response {
        let status = match self {
            ControlError::NotFound(_) => StatusCode::NOT_FOUND,
            ControlError::Invalid(_) => StatusCode::BAD_REQUEST,
            ControlError::Conflict(_) => StatusCode::CONFLICT,
            ControlError::Gone => StatusCode::GONE,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    clusters: Arc<RwLock<BTreeMap<u64, ClusterHandle>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    async fn get(&self, id: u64) -> Result<ClusterHandle, ControlError> {
        self.clusters.read().await.get(&id).cloned().ok_or_else(|| ControlError::NotFound(format!("cluster {id}")))
    }

    /// Stops every cluster.
    pub async fn shutdown(&self) {
        let all: Vec<ClusterHandle> = std::mem::take(&mut *self.clusters.write().await).into_values().collect();
        for c in all {
            c.stop().await;
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: u64,
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub txns: Vec<TxnId>,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: u64,
}

fn parse_node(s: &str) -> Result<NodeId, ControlError> {
    let bad = || ControlError::Invalid(format!("node must look like <chain>.<node>, got {s:?}"));
    let (c, n) = s.split_once('.').ok_or_else(bad)?;
    Ok(NodeId::new(c.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?))
}

async fn create(State(app): State<AppState>, Json(spec): Json<ClusterSpec>) -> Result<(StatusCode, Json<Created>), ControlError> {
    let cfg = spec.to_config().map_err(|e| ControlError::Invalid(e.to_string()))?;
    let id = app.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let handle = ClusterHandle::start(id, spec).await?;
    app.clusters.write().await.insert(id, handle);
    log::info!("created cluster {id}");
    Ok((StatusCode::CREATED, Json(Created { id, nodes: cfg.all_nodes() })))
}

async fn list(State(app): State<AppState>) -> Json<Vec<u64>> {
    Json(app.clusters.read().await.keys().copied().collect())
}

async fn submit(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Json(req): Json<TxnRequest>,
) -> Result<Json<Submitted>, ControlError> {
    let txns = app.get(id).await?.submit(req).await?;
    Ok(Json(Submitted { txns }))
}

async fn crash(State(app): State<AppState>, Path((id, node)): Path<(u64, String)>) -> Result<StatusCode, ControlError> {
    app.get(id).await?.crash(parse_node(&node)?).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn restart(State(app): State<AppState>, Path((id, node)): Path<(u64, String)>) -> Result<StatusCode, ControlError> {
    app.get(id).await?.restart(parse_node(&node)?).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn state(State(app): State<AppState>, Path(id): Path<u64>) -> Result<Json<ClusterState>, ControlError> {
    Ok(Json(app.get(id).await?.state().await?))
}

async fn delete(State(app): State<AppState>, Path(id): Path<u64>) -> Result<StatusCode, ControlError> {
    let handle = app.clusters.write().await.remove(&id).ok_or_else(|| ControlError::NotFound(format!("cluster {id}")))?;
    handle.stop().await;
    Ok(StatusCode::NO_CONTENT)
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<u64>,
    Query(q): Query<EventsQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ControlError> {
    let handle = app.get(id).await?;
    Ok(ws.on_upgrade(move |socket| stream_events(socket, handle, q.from)))
}

async fn stream_events(mut socket: WebSocket, handle: ClusterHandle, from: u64) {
    let (backlog, mut rx) = handle.subscribe(from);
    let mut next = from;
    for ev in backlog {
        next = ev.seq + 1;
        if send_event(&mut socket, &ev).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(ev) => {
                    if ev.seq < next {
                        continue;
                    }
                    next = ev.seq + 1;
                    if send_event(&mut socket, &ev).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    // The client resyncs from the state endpoint.
                    log::warn!("event subscriber of cluster {} lagged by {n}", handle.id);
                    let _ = socket.send(WsMessage::Close(None)).await;
                    return;
                }
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = socket.send(WsMessage::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn send_event(socket: &mut WebSocket, ev: &StreamEvent) -> Result<(), axum::Error> {
    let text = serde_json::to_string(ev).expect("events serialize");
    socket.send(WsMessage::Text(text.into())).await
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/clusters", post(create).get(list))
        .route("/clusters/{id}/txns", post(submit))
        .route("/clusters/{id}/nodes/{node}/crash", post(crash))
        .route("/clusters/{id}/nodes/{node}/restart", post(restart))
        .route("/clusters/{id}/state", get(state))
        .route("/clusters/{id}", axum::routing::delete(delete))
        .route("/clusters/{id}/events", get(events))
        .with_state(app)
}

/// Serves until the process is interrupted.
pub async fn serve(addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("control service on http://{}", listener.local_addr()?);
    let app = AppState::default();
    let shutdown_app = app.clone();
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            shutdown_app.shutdown().await;
        })
        .await
}
