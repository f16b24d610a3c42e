//! Axum WebSocket server: `/ws` on the configured port.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use quadgrasp::world::Scenario;

use crate::protocol::{parse_inbound, ProtocolError};
use crate::session::{LoopMsg, Outgoing, Session, SessionConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub port: u16,
    pub session: SessionConfig,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
    /// Messages queued per client before the client is dropped.
    pub client_buffer: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8765,
            session: SessionConfig::default(),
            speed: 1.0,
            client_buffer: 256,
        }
    }
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("port {0} is in use")]
    PortInUse(u16),
    #[error("invalid serve config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
struct AppState {
    loop_tx: mpsc::Sender<LoopMsg>,
    next_id: Arc<AtomicU64>,
    client_buffer: usize,
}

/// A bound server. Dropping it leaves the tasks running; call `abort` to stop.
pub struct RunningServer {
    pub addr: SocketAddr,
    server: JoinHandle<()>,
    mission_loop: JoinHandle<()>,
}

impl RunningServer {
    pub fn abort(&self) {
        self.server.abort();
        self.mission_loop.abort();
    }

    /// Waits until the server stops.
    pub async fn wait(self) {
        let _ = self.server.await;
        self.mission_loop.abort();
    }
}

/// Binds the port and starts the mission loop and the server tasks.
pub async fn start(scenario: Scenario, cfg: ServeConfig) -> Result<RunningServer, BridgeError> {
    if !(cfg.speed > 0.0 && cfg.speed.is_finite()) {
        return Err(BridgeError::Config("speed must be positive".into()));
    }
    let s = &cfg.session;
    if !(s.dt > 0.0 && s.status_hz > 0.0 && s.frame_hz > 0.0) {
        return Err(BridgeError::Config("dt and rates must be positive".into()));
    }
    if cfg.client_buffer == 0 {
        return Err(BridgeError::Config("client_buffer must be at least 1".into()));
    }
    let listener = TcpListener::bind(("127.0.0.1", cfg.port)).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => BridgeError::PortInUse(cfg.port),
        _ => BridgeError::Io(e),
    })?;
    let addr = listener.local_addr()?;
    let (loop_tx, loop_rx) = mpsc::channel(1024);
    let period = Duration::from_secs_f64(cfg.session.dt / cfg.speed);
    let session = Session::new(scenario, cfg.session.clone());
    let mission_loop = tokio::spawn(run_loop(session, loop_rx, period));
    let state = AppState {
        loop_tx,
        next_id: Arc::new(AtomicU64::new(1)),
        client_buffer: cfg.client_buffer,
    };
    let app = Router::new().route("/ws", get(ws_handler)).with_state(state);
    let server = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    log::info!("serving ws://{addr}/ws");
    Ok(RunningServer {
        addr,
        server,
        mission_loop,
    })
}

/// Serves until the process is stopped.
pub async fn serve(scenario: Scenario, cfg: ServeConfig) -> Result<(), BridgeError> {
    start(scenario, cfg).await?.wait().await;
    Ok(())
}

async fn run_loop(mut session: Session, mut rx: mpsc::Receiver<LoopMsg>, period: Duration) {
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        interval.tick().await;
        loop {
            match rx.try_recv() {
                Ok(m) => session.handle(m),
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        }
        session.step();
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

async fn handle_socket(socket: WebSocket, state: AppState) {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::channel::<Outgoing>(state.client_buffer);
    if state.loop_tx.send(LoopMsg::Connect { id, tx }).await.is_err() {
        return;
    }
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            match out {
                Outgoing::Text(text) => {
                    if sink.send(Message::Text(text.to_string())).await.is_err() {
                        return;
                    }
                }
                Outgoing::Close { code, reason } => {
                    let frame = CloseFrame {
                        code,
                        reason: reason.into(),
                    };
                    let _ = sink.send(Message::Close(Some(frame))).await;
                    return;
                }
            }
        }
        // The session dropped this client.
        let _ = sink.close().await;
    });
    while let Some(Ok(msg)) = stream.next().await {
        let parsed = match msg {
            Message::Text(t) => parse_inbound(&t),
            Message::Binary(_) => Err(ProtocolError::Malformed("binary frames are not supported".into())),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        let malformed = matches!(parsed, Err(ProtocolError::Malformed(_)));
        if state.loop_tx.send(LoopMsg::Inbound { id, msg: parsed }).await.is_err() || malformed {
            break;
        }
    }
    let _ = state.loop_tx.send(LoopMsg::Disconnect { id }).await;
    let _ = writer.await;
}
