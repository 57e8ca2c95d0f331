use std::path::{Path, PathBuf};
use std::time::Duration;

use aor::server::{start, WireMessage, PROTOCOL};
use aor::{MllmSpec, RunOptions};
use aor_core::scene::{load_scene, ColorFrame};
use aor_core::session::{parse_log, replay, snapshot, Snapshot};
use futures_util::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

async fn recv(ws: &mut Ws) -> WireMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("message within 10 s")
            .expect("stream open")
            .expect("valid frame");
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

/// Read until an event satisfies `done`; returns every event message seen.
async fn events_until(ws: &mut Ws, done: impl Fn(&WireMessage) -> bool) -> Vec<WireMessage> {
    let mut seen = Vec::new();
    loop {
        let m = recv(ws).await;
        assert_eq!(m.kind, "event", "{m:?}");
        let stop = done(&m);
        seen.push(m);
        if stop {
            return seen;
        }
    }
}

fn is_kind(m: &WireMessage, kind: &str) -> bool {
    m.payload["kind"] == kind
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn viewer_protocol_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = fixtures().join("scenes/kitchen");
    let mut opts = RunOptions::new(&scene_dir, MllmSpec::MockFixed("A dark soy sauce.".into()));
    opts.data_dir = dir.path().into();
    // slow enough that both clients connect before the first frame
    opts.cadence_ms = 200;
    let server = start(opts.clone(), "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let url = format!("ws://{}/ws", server.addr);

    let (mut a, _) = connect_async(&url).await.unwrap();
    let (mut b, _) = connect_async(&url).await.unwrap();
    let mut snaps = Vec::new();
    for ws in [&mut a, &mut b] {
        let hello = recv(ws).await;
        assert_eq!(hello.kind, "hello");
        assert_eq!(hello.payload["protocol"], PROTOCOL);
        assert_eq!(hello.payload["scene"], "kitchen");
        assert_eq!(hello.payload["frame_count"], 6);
        assert_eq!(hello.payload["width"], 640);
        let snap = recv(ws).await;
        assert_eq!(snap.kind, "snapshot");
        let parsed: Snapshot = serde_json::from_value(snap.payload.clone()).unwrap();
        assert_eq!(Some(parsed.seq), snap.seq);
        snaps.push(parsed.seq);
    }

    // malformed input is answered to the sender only
    send(&mut a, "{not json").await;
    let err = recv(&mut a).await;
    assert_eq!(err.kind, "error");
    assert!(err.payload["reason"].as_str().unwrap().contains("malformed"));
    send(&mut a, r#"{"seq":7,"type":"command","payload":{"type":"launch","proxy":"p1"}}"#).await;
    let err = recv(&mut a).await;
    assert_eq!((err.kind.as_str(), err.seq), ("error", Some(7)));
    send(&mut a, r#"{"seq":8,"type":"subscribe"}"#).await;
    assert_eq!(recv(&mut a).await.seq, Some(8));

    let last_frame = |m: &WireMessage| is_kind(m, "frame_processed") && m.payload["payload"]["frame"] == 5;
    let ea = events_until(&mut a, last_frame).await;
    let eb = events_until(&mut b, last_frame).await;
    let from = snaps[0].max(snaps[1]);
    let tail = |v: &[WireMessage]| v.iter().filter(|m| m.seq.unwrap() > from).cloned().collect::<Vec<_>>();
    assert_eq!(tail(&ea), tail(&eb), "subscribers see the same stream");
    assert!(ea.windows(2).all(|w| w[1].seq.unwrap() == w[0].seq.unwrap() + 1));

    // a command from one client reaches both
    send(&mut b, &json!({"seq": 1, "type": "command", "payload": {"type": "select", "proxy": "p1"}}).to_string()).await;
    let changed = |m: &WireMessage| is_kind(m, "state_changed");
    let sa = events_until(&mut a, changed).await;
    let sb = events_until(&mut b, changed).await;
    assert_eq!(sa.last(), sb.last());
    send(&mut a, r#"{"type":"command","payload":{"type":"dispatch","proxy":"p1","action":"info"}}"#).await;
    let replied = |m: &WireMessage| is_kind(m, "mllm_replied");
    let ra = events_until(&mut a, replied).await;
    assert_eq!(ra.last().unwrap().payload["payload"]["text"], "A dark soy sauce.");
    events_until(&mut b, replied).await;

    // images
    let base = format!("http://{}", server.addr);
    let scene = load_scene(&scene_dir).unwrap();
    let fetch = |path: String| {
        tokio::task::spawn_blocking(move || {
            let resp = ureq::get(&path).config().http_status_as_error(false).build().call().unwrap();
            let status = resp.status().as_u16();
            (status, resp.into_body().read_to_vec().unwrap())
        })
    };
    let (status, body) = fetch(format!("{base}/frames/2.png")).await.unwrap();
    assert_eq!(status, 200);
    assert_eq!(ColorFrame::from_png(&body).unwrap(), scene.frames[2].color);
    assert_eq!(fetch(format!("{base}/frames/6.png")).await.unwrap().0, 404);
    assert_eq!(fetch(format!("{base}/frames/x.png")).await.unwrap().0, 404);
    let (status, body) = fetch(format!("{base}/crops/p1.png")).await.unwrap();
    assert_eq!(status, 200);
    let crop = ColorFrame::from_png(&body).unwrap();
    send(&mut a, r#"{"type":"snapshot"}"#).await;
    let reply = loop {
        let m = recv(&mut a).await;
        if m.kind == "snapshot" {
            break m;
        }
    };
    let snap: Snapshot = serde_json::from_value(reply.payload).unwrap();
    let p1 = snap.proxies.iter().find(|p| p.id.to_string() == "p1").unwrap();
    assert_eq!(crop, scene.crop(p1.crop.frame, p1.crop.bbox).unwrap().image);
    assert_eq!(fetch(format!("{base}/crops/p99.png")).await.unwrap().0, 404);

    drop(a);
    drop(b);
    let state = server.shutdown().await.unwrap();
    assert!(state.finished);
    let log = std::fs::read_to_string(opts.events_path()).unwrap();
    let events = parse_log(&log).unwrap();
    let folded = replay(&events).unwrap();
    assert_eq!(folded, state);
    // the snapshot the client saw equals the fold of the log prefix it covered
    let prefix = replay(&events[..snap.seq as usize]).unwrap();
    assert_eq!(snapshot(&prefix, &scene), snap);
    assert_eq!(std::fs::read_to_string(opts.state_path()).unwrap(), aor::state_json(&state));
}

#[tokio::test]
async fn bind_failure_is_a_startup_error() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = RunOptions::new(fixtures().join("scenes/synthetic"), MllmSpec::Mock);
    opts.data_dir = dir.path().into();
    let err = start(opts, taken.local_addr().unwrap()).await.err().unwrap();
    assert!(format!("{err:#}").contains("binding"));
}
