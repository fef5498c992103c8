//! Websocket front end. The session runs on its own thread; connections
//! talk to it through a command queue and a snapshot broadcast.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc as std_mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use kitchenbot::session::{Ack, ClientId, Command, Frame, Session};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};

/// Snapshots buffered per slow client before the oldest are dropped.
const SNAPSHOT_BACKLOG: usize = 8;

enum LoopMsg {
    Command {
        client: ClientId,
        id: u64,
        command: Command,
        reply: mpsc::UnboundedSender<String>,
    },
    Disconnect(ClientId),
}

#[derive(Clone)]
struct Shared {
    commands: std_mpsc::Sender<LoopMsg>,
    snapshots: broadcast::Sender<Arc<str>>,
    next_client: Arc<AtomicU64>,
}

/// Runs the session loop until `stop` is set. Returns the session.
fn run_loop(
    mut session: Session,
    commands: std_mpsc::Receiver<LoopMsg>,
    snapshots: broadcast::Sender<Arc<str>>,
    stop: Arc<AtomicBool>,
    realtime: bool,
) -> Session {
    let period = Duration::from_secs_f64(session.dt());
    let mut deadline = Instant::now();
    let mut overruns = 0u64;
    while !stop.load(Ordering::Relaxed) {
        while let Ok(msg) = commands.try_recv() {
            match msg {
                LoopMsg::Command {
                    client,
                    id,
                    command,
                    reply,
                } => {
                    let ack = session.handle(client, id, command);
                    let _ = reply.send(Frame::Ack(ack).to_json());
                }
                LoopMsg::Disconnect(client) => session.disconnect(client),
            }
        }
        if let Some(snapshot) = session.step() {
            // no receivers is fine
            let _ = snapshots.send(Frame::Snapshot(Box::new(snapshot)).to_json().into());
        }
        if realtime {
            deadline += period;
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            } else if now - deadline > period * 10 {
                overruns += 1;
                log::warn!("loop fell {:?} behind, resyncing ({overruns} so far)", now - deadline);
                deadline = now;
            }
        }
    }
    session
}

/// A running gateway.
pub struct Gateway {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    server_stop: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<()>,
    sim: Option<JoinHandle<Session>>,
}

impl Gateway {
    /// Binds `bind` and starts the loop and server. With `realtime` off the
    /// loop runs as fast as it can.
    pub async fn start(session: Session, bind: &str, realtime: bool) -> std::io::Result<Gateway> {
        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let (cmd_tx, cmd_rx) = std_mpsc::channel();
        let (snap_tx, _) = broadcast::channel(SNAPSHOT_BACKLOG);
        let stop = Arc::new(AtomicBool::new(false));
        let sim = {
            let snap_tx = snap_tx.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("session".into())
                .spawn(move || run_loop(session, cmd_rx, snap_tx, stop, realtime))?
        };
        let shared = Shared {
            commands: cmd_tx,
            snapshots: snap_tx,
            next_client: Arc::new(AtomicU64::new(1)),
        };
        let app = Router::new().route("/ws", get(upgrade)).with_state(shared);
        let (server_stop, stopped) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = stopped.await;
            });
            if let Err(e) = serve.await {
                log::error!("server: {e}");
            }
        });
        log::info!("listening on ws://{addr}/ws");
        Ok(Gateway {
            addr,
            stop,
            server_stop: Some(server_stop),
            server,
            sim: Some(sim),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops the server and the loop and hands back the session.
    pub async fn shutdown(mut self) -> Session {
        if let Some(tx) = self.server_stop.take() {
            let _ = tx.send(());
        }
        self.stop.store(true, Ordering::Relaxed);
        self.server.abort();
        let sim = self.sim.take().expect("joined once");
        tokio::task::spawn_blocking(move || sim.join().expect("session loop panicked"))
            .await
            .expect("join task")
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> impl IntoResponse {
    let client = shared.next_client.fetch_add(1, Ordering::Relaxed);
    ws.on_upgrade(move |socket| connection(socket, client, shared))
}

/// Best-effort id of a frame that failed to parse.
fn frame_id(text: &str) -> u64 {
    serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
        .unwrap_or(0)
}

async fn connection(socket: WebSocket, client: ClientId, shared: Shared) {
    log::info!("client {client} connected");
    let (mut sink, mut stream) = socket.split();
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<String>();
    let mut snapshots = shared.snapshots.subscribe();

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                reply = reply_rx.recv() => match reply {
                    Some(t) => t,
                    None => break,
                },
                snap = snapshots.recv() => match snap {
                    Ok(t) => t.to_string(),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log::debug!("client {client} skipped {n} snapshots");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(_) => {
                let _ = reply_tx.send(Frame::Ack(Ack::rejected(0, "binary frames are not supported")).to_json());
                continue;
            }
            Message::Close(_) => break,
            _ => continue,
        };
        match Frame::parse(&text) {
            Ok(Frame::Command { id, command }) => {
                let msg = LoopMsg::Command {
                    client,
                    id,
                    command,
                    reply: reply_tx.clone(),
                };
                if shared.commands.send(msg).is_err() {
                    break;
                }
            }
            Ok(_) => {
                let _ = reply_tx.send(Frame::Ack(Ack::rejected(frame_id(&text), "clients may only send commands")).to_json());
            }
            Err(e) => {
                let _ = reply_tx.send(Frame::Ack(Ack::rejected(frame_id(&text), e)).to_json());
            }
        }
    }
    let _ = shared.commands.send(LoopMsg::Disconnect(client));
    drop(reply_tx);
    writer.abort();
    log::info!("client {client} disconnected");
}
