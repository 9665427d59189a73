use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::protocol::{Axis, Envelope, ErrorKind, Reply, Request, PROTOCOL_VERSION};
use crate::registry::Registry;
use crate::session::{TrainerError, TrainerSession};
use crate::slice;

/// Decodes one text frame, applies it and encodes the reply.
pub fn process_text(session: &mut TrainerSession, text: &str) -> String {
    let reply = match serde_json::from_str::<Envelope<Request>>(text) {
        Ok(env) if env.v == PROTOCOL_VERSION => session.handle(env.body),
        Ok(env) => TrainerError::BadMessage(format!("unsupported protocol version {}", env.v)).into_reply(),
        Err(e) => TrainerError::BadMessage(e.to_string()).into_reply(),
    };
    serde_json::to_string(&Envelope::new(reply)).expect("replies serialize")
}

async fn session_socket(ws: WebSocketUpgrade, State(registry): State<Arc<Registry>>) -> Response {
    ws.on_upgrade(move |socket| run_socket(socket, registry))
}

async fn run_socket(mut socket: WebSocket, registry: Arc<Registry>) {
    let mut session = TrainerSession::new(registry);
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        // planning on first use can take seconds; keep it off the reactor
        let joined = tokio::task::spawn_blocking(move || {
            let reply = process_text(&mut session, &text);
            (session, reply)
        })
        .await;
        let Ok((s, reply)) = joined else { break };
        session = s;
        if socket.send(Message::Text(reply.into())).await.is_err() {
            break;
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub volume: String,
    pub axis: Axis,
    pub index: usize,
    #[serde(default)]
    pub overlay: bool,
}

async fn get_slice(State(registry): State<Arc<Registry>>, Query(q): Query<SliceQuery>) -> Response {
    let reply = match registry.get(&q.volume) {
        None => TrainerError::UnknownVolume(q.volume).into_reply(),
        Some(v) => match slice::extract(v.volume(), q.axis, q.index, q.overlay, slice::DEFAULT_WINDOW) {
            Some(s) => Reply::Slice(s),
            None => TrainerError::OutOfBounds(format!("slice {} outside the volume", q.index)).into_reply(),
        },
    };
    let status = match &reply {
        Reply::Error { kind: ErrorKind::UnknownVolume, .. } => StatusCode::NOT_FOUND,
        Reply::Error { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::OK,
    };
    (status, Json(Envelope::new(reply))).into_response()
}

async fn list_volumes(State(registry): State<Arc<Registry>>) -> Json<Vec<String>> {
    Json(registry.names())
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/session", get(session_socket))
        .route("/slice", get(get_slice))
        .route("/volumes", get(list_volumes))
        .with_state(registry)
}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(addr: SocketAddr, registry: Arc<Registry>) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    serve_on(listener, registry).await
}

pub async fn serve_on(listener: TcpListener, registry: Arc<Registry>) -> std::io::Result<()> {
    axum::serve(listener, router(registry)).await
}
