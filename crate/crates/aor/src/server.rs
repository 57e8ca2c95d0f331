//! Live session behind the viewer protocol.
//!
//! One thread owns the [`Engine`] and is the only writer. HTTP and
//! WebSocket handlers enqueue commands on a channel and read immutable
//! snapshots; MLLM jobs run on worker threads and post their results back
//! through the same channel.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::Context;
use aor_core::ids::{ProxyId, RequestId};
use aor_core::mllm::MllmClient;
use aor_core::scene::SceneDirectory;
use aor_core::session::{Command, Engine, MllmJob, SessionEvent, SessionState, Snapshot, TraceEntry};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};

use crate::session::{prepare, state_json, Prepared, RunOptions};

pub const PROTOCOL: &str = "aor-viewer/1";

/// Once the frames run out the clock keeps moving in steps of this size,
/// so widgets still fire without flooding the log with ticks.
pub const IDLE_TICK_MS: u64 = 1000;

const BROADCAST_CAPACITY: usize = 4096;

enum Input {
    Command(Command),
    JobDone(RequestId, Result<String, String>),
    Shutdown,
}

/// Everything the network side reads.
#[derive(Clone)]
struct Shared {
    scene: Arc<SceneDirectory>,
    session_id: String,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
    events: broadcast::Sender<Arc<SessionEvent>>,
    inputs: mpsc::Sender<Input>,
}

impl Shared {
    fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().expect("snapshot lock"))
    }
}

/// Protocol message, both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub payload: Value,
}

impl WireMessage {
    pub fn new(kind: &str, seq: Option<u64>, payload: Value) -> Self {
        Self {
            seq,
            kind: kind.into(),
            payload,
        }
    }

    pub fn error(seq: Option<u64>, reason: impl Into<String>) -> Self {
        Self::new("error", seq, json!({ "reason": reason.into() }))
    }

    fn text(&self) -> Message {
        Message::Text(serde_json::to_string(self).expect("message serializes").into())
    }
}

/// A running server. Dropping it without [`ServerHandle::shutdown`] leaves
/// the session running until the process exits.
pub struct ServerHandle {
    pub addr: SocketAddr,
    inputs: mpsc::Sender<Input>,
    http_stop: Option<oneshot::Sender<()>>,
    http: Option<tokio::task::JoinHandle<()>>,
    session: Option<JoinHandle<anyhow::Result<SessionState>>>,
}

impl ServerHandle {
    /// Finish the session, stop serving and return the final state.
    pub async fn shutdown(mut self) -> anyhow::Result<SessionState> {
        let _ = self.inputs.send(Input::Shutdown);
        let session = self.session.take().expect("joined once");
        let state = tokio::task::spawn_blocking(move || session.join())
            .await?
            .map_err(|_| anyhow::anyhow!("session thread panicked"))??;
        if let Some(stop) = self.http_stop.take() {
            let _ = stop.send(());
        }
        if let Some(http) = self.http.take() {
            let _ = http.await;
        }
        Ok(state)
    }

    /// Serve until the session thread ends on its own.
    pub async fn wait(mut self) -> anyhow::Result<SessionState> {
        let session = self.session.take().expect("joined once");
        let state = tokio::task::spawn_blocking(move || session.join())
            .await?
            .map_err(|_| anyhow::anyhow!("session thread panicked"))??;
        Ok(state)
    }
}

/// Bind `addr`, start the session thread and serve the viewer protocol.
pub async fn start(opts: RunOptions, addr: SocketAddr) -> anyhow::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let addr = listener.local_addr()?;
    let Prepared { engine, client, trace } = prepare(&opts)?;
    let log = BufWriter::new(
        File::create(opts.events_path()).with_context(|| format!("creating {}", opts.events_path().display()))?,
    );
    let (events, _) = broadcast::channel(BROADCAST_CAPACITY);
    let (inputs, rx) = mpsc::channel();
    let shared = Shared {
        scene: Arc::clone(engine.scene()),
        session_id: opts.session_id.clone(),
        snapshot: Arc::new(RwLock::new(Arc::new(engine.snapshot()))),
        events: events.clone(),
        inputs: inputs.clone(),
    };
    let mut core = Core {
        engine,
        client,
        trace,
        next_entry: 0,
        log,
        shared: shared.clone(),
        opts: opts.clone(),
    };
    // session_started is already in the engine log
    let initial = core.engine.log().to_vec();
    core.publish(&initial)?;
    let session = std::thread::Builder::new()
        .name("aor-session".into())
        .spawn(move || core.run(rx))?;

    let app = router(shared);
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        let served = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = stop_rx.await;
        });
        if let Err(e) = served.await {
            tracing::error!("server stopped: {e}");
        }
    });
    tracing::info!(%addr, "serving");
    Ok(ServerHandle {
        addr,
        inputs,
        http_stop: Some(stop_tx),
        http: Some(http),
        session: Some(session),
    })
}

struct Core {
    engine: Engine,
    client: Arc<dyn MllmClient>,
    trace: Vec<TraceEntry>,
    next_entry: usize,
    log: BufWriter<File>,
    shared: Shared,
    opts: RunOptions,
}

impl Core {
    fn run(mut self, rx: mpsc::Receiver<Input>) -> anyhow::Result<SessionState> {
        let cadence = Duration::from_millis(self.engine.config().cadence_ms);
        let mut next_tick = Instant::now();
        loop {
            let wait = next_tick.saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(Input::Command(cmd)) => {
                    let out = self.engine.handle(cmd);
                    self.after(out.events, out.jobs)?;
                }
                Ok(Input::JobDone(request, result)) => {
                    let out = self.engine.complete(request, result);
                    self.after(out.events, out.jobs)?;
                }
                Ok(Input::Shutdown) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {
                    let idle = self.tick()?;
                    next_tick += if idle { Duration::from_millis(IDLE_TICK_MS) } else { cadence };
                }
            }
        }
        let done = self.engine.finish();
        self.publish(&done)?;
        std::fs::write(self.opts.state_path(), state_json(self.engine.state()))?;
        Ok(self.engine.state().clone())
    }

    /// One clock beat. Returns true once the frames are exhausted.
    fn tick(&mut self) -> anyhow::Result<bool> {
        if self.engine.is_finished() {
            return Ok(true);
        }
        let idle = self.engine.frames_remaining() == 0;
        let mut events = Vec::new();
        let frame = if idle {
            let now = self.engine.state().clock_ms + IDLE_TICK_MS;
            events.extend(self.engine.advance_clock(now)?);
            usize::MAX
        } else {
            let f = self.engine.next_frame();
            events.extend(self.engine.step()?);
            f
        };
        self.after(events, Vec::new())?;
        while let Some(entry) = self.trace.get(self.next_entry).filter(|e| e.at_frame <= frame).cloned() {
            self.next_entry += 1;
            if let Some(cmd) = entry.command {
                let out = self.engine.handle(cmd);
                self.after(out.events, out.jobs)?;
            }
            if let Some(ms) = entry.advance_ms {
                let now = self.engine.state().clock_ms + ms;
                let events = self.engine.advance_clock(now)?;
                self.after(events, Vec::new())?;
            }
        }
        Ok(idle)
    }

    fn after(&mut self, events: Vec<SessionEvent>, jobs: Vec<MllmJob>) -> anyhow::Result<()> {
        self.publish(&events)?;
        for job in jobs {
            let client = Arc::clone(&self.client);
            let inputs = self.shared.inputs.clone();
            std::thread::spawn(move || {
                let result = client.query(&job.query).map(|r| r.text).map_err(|e| e.to_string());
                let _ = inputs.send(Input::JobDone(job.request, result));
            });
        }
        Ok(())
    }

    /// Log, then refresh the snapshot, then broadcast. A subscriber that
    /// reads the snapshot after subscribing therefore never misses an
    /// event and can drop those already folded in by seq.
    fn publish(&mut self, events: &[SessionEvent]) -> anyhow::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        for ev in events {
            serde_json::to_writer(&mut self.log, ev)?;
            self.log.write_all(b"\n")?;
        }
        self.log.flush()?;
        *self.shared.snapshot.write().expect("snapshot lock") = Arc::new(self.engine.snapshot());
        for ev in events {
            let _ = self.shared.events.send(Arc::new(ev.clone()));
        }
        Ok(())
    }
}

fn router(shared: Shared) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/snapshot", get(snapshot_json))
        .route("/frames/{file}", get(frame_png))
        .route("/crops/{file}", get(crop_png))
        .with_state(shared)
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn not_found(what: String) -> Response {
    (StatusCode::NOT_FOUND, what).into_response()
}

async fn snapshot_json(State(s): State<Shared>) -> Response {
    axum::Json(s.snapshot().as_ref().clone()).into_response()
}

async fn frame_png(State(s): State<Shared>, UrlPath(file): UrlPath<String>) -> Response {
    let Some(index) = file.strip_suffix(".png").and_then(|i| i.parse::<usize>().ok()) else {
        return not_found(format!("no frame {file}"));
    };
    match s.scene.frame(index) {
        Some(f) => png(f.color.to_png()),
        None => not_found(format!("no frame {index}")),
    }
}

async fn crop_png(State(s): State<Shared>, UrlPath(file): UrlPath<String>) -> Response {
    let Some(id) = file.strip_suffix(".png").and_then(|i| i.parse::<ProxyId>().ok()) else {
        return not_found(format!("no proxy {file}"));
    };
    let snap = s.snapshot();
    let Some(view) = snap.proxies.iter().find(|p| p.id == id) else {
        return not_found(format!("no proxy {id}"));
    };
    match s.scene.crop(view.crop.frame, view.crop.bbox) {
        Some(c) => png(c.image.to_png()),
        None => not_found(format!("crop of {id} is outside its frame")),
    }
}

async fn ws_upgrade(State(s): State<Shared>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client_loop(s, socket))
}

fn snapshot_message(snap: &Snapshot) -> WireMessage {
    WireMessage::new(
        "snapshot",
        Some(snap.seq),
        serde_json::to_value(snap).expect("snapshot serializes"),
    )
}

fn event_message(ev: &SessionEvent) -> WireMessage {
    WireMessage::new("event", Some(ev.seq), serde_json::to_value(ev).expect("event serializes"))
}

/// Reply to one client message, if it warrants a direct reply.
fn handle_client_text(s: &Shared, text: &str) -> Option<WireMessage> {
    let msg: WireMessage = match serde_json::from_str(text) {
        Ok(m) => m,
        Err(e) => return Some(WireMessage::error(None, format!("malformed message: {e}"))),
    };
    match msg.kind.as_str() {
        "command" => match serde_json::from_value::<Command>(msg.payload) {
            Ok(cmd) => {
                if s.inputs.send(Input::Command(cmd)).is_err() {
                    return Some(WireMessage::error(msg.seq, "session has ended"));
                }
                None
            }
            Err(e) => Some(WireMessage::error(msg.seq, format!("malformed command: {e}"))),
        },
        "snapshot" => Some(snapshot_message(&s.snapshot())),
        other => Some(WireMessage::error(msg.seq, format!("unknown message type {other:?}"))),
    }
}

async fn client_loop(s: Shared, socket: WebSocket) {
    let mut events = s.events.subscribe();
    let snap = s.snapshot();
    let hello = WireMessage::new(
        "hello",
        None,
        json!({
            "protocol": PROTOCOL,
            "session_id": s.session_id,
            "scene": s.scene.name,
            "frame_count": s.scene.frame_count(),
            "width": s.scene.intrinsics.width,
            "height": s.scene.intrinsics.height,
        }),
    );
    let (mut tx, mut rx) = socket.split();
    if tx.send(hello.text()).await.is_err() || tx.send(snapshot_message(&snap).text()).await.is_err() {
        return;
    }
    let mut last_seq = snap.seq;
    loop {
        tokio::select! {
            ev = events.recv() => {
                let out = match ev {
                    Ok(ev) if ev.seq <= last_seq => continue,
                    Ok(ev) => {
                        last_seq = ev.seq;
                        vec![event_message(&ev)]
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        let snap = s.snapshot();
                        last_seq = snap.seq;
                        vec![
                            WireMessage::error(None, format!("fell behind by {n} events; resynchronizing")),
                            snapshot_message(&snap),
                        ]
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                for m in out {
                    if tx.send(m.text()).await.is_err() {
                        return;
                    }
                }
            }
            msg = rx.next() => {
                let reply = match msg {
                    Some(Ok(Message::Text(t))) => handle_client_text(&s, t.as_str()),
                    Some(Ok(Message::Binary(_))) => Some(WireMessage::error(None, "binary messages are not supported")),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => None,
                };
                if let Some(m) = reply {
                    if m.kind == "snapshot" {
                        last_seq = last_seq.max(m.seq.unwrap_or(0));
                    }
                    if tx.send(m.text()).await.is_err() {
                        return;
                    }
                }
            }
        }
    }
}
