//! HTTP backends against a minimal in-process server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use aor_core::detection::{DetectionError, Detector, FilterPolicy, HttpDetector};
use aor_core::ids::ConversationId;
use aor_core::mllm::{HistoryTurn, LiveClient, MllmClient, MllmError, MllmRequest, RequestImage, Role};
use aor_core::scene::{ColorFrame, PixelRect};
use base64::Engine as _;

struct Captured {
    head: String,
    body: Vec<u8>,
}

/// Serve `replies.len()` connections, one reply each, after an optional
/// delay. Returns the URL and a receiver of captured requests.
fn serve(replies: Vec<(u16, String, Duration)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/x", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let (stream, _) = listener.accept().unwrap();
            let tx = tx.clone();
            thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    head.push_str(&line);
                }
                let len = head
                    .lines()
                    .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().to_string()))
                    .map_or(0, |v| v.parse().unwrap());
                let mut req_body = vec![0; len];
                reader.read_exact(&mut req_body).unwrap();
                let _ = tx.send(Captured { head, body: req_body });
                thread::sleep(delay);
                let mut stream = stream;
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            });
        }
    });
    (url, rx)
}

fn frame() -> ColorFrame {
    let mut f = ColorFrame::filled(64, 48, [10, 20, 30]);
    f.put_pixel(3, 4, [255, 0, 0]);
    f
}

#[test]
fn detector_posts_png_and_normalizes_boxes() {
    let reply = r#"[
        {"label": "bottle", "confidence": 0.8, "bbox": [10.5, 5, 10, 10]},
        {"label": "cup", "confidence": 1.3, "bbox": [60, 40, 10, 10]},
        {"label": "spaceship", "confidence": 0.9, "bbox": [0, 0, 5, 5]},
        {"label": "book", "confidence": 0.9, "bbox": [100, 100, 5, 5]}
    ]"#;
    let (url, rx) = serve(vec![(200, reply.into(), Duration::ZERO)]);
    let mut det = HttpDetector::new(url, Duration::from_secs(5));
    let out = det.detect(&frame(), 3).unwrap();
    let req = rx.recv().unwrap();
    assert!(req.head.starts_with("POST /x"));
    assert!(req.head.to_ascii_lowercase().contains("content-type: image/png"));
    assert_eq!(ColorFrame::from_png(&req.body).unwrap(), frame());

    assert_eq!(out.detections.len(), 2);
    assert_eq!(out.detections[0].bbox, PixelRect::new(10, 5, 11, 10));
    assert_eq!(out.detections[0].frame, 3);
    assert_eq!(out.detections[1].bbox, PixelRect::new(60, 40, 4, 8));
    assert_eq!(out.detections[1].confidence, 1.0);
    assert_eq!(out.clipped.len(), 1);
    assert_eq!(out.clipped[0].original, PixelRect::new(60, 40, 10, 10));
    assert_eq!(out.rejected.len(), 2);
}

#[test]
fn detector_failures_are_typed() {
    let (url, _rx) = serve(vec![
        (500, "{}".into(), Duration::ZERO),
        (200, "not json".into(), Duration::ZERO),
        (200, "[]".into(), Duration::from_millis(800)),
    ]);
    let mut det = HttpDetector::new(url, Duration::from_millis(300));
    assert!(matches!(det.detect(&frame(), 0), Err(DetectionError::Unavailable(m)) if m.contains("500")));
    assert!(matches!(det.detect(&frame(), 0), Err(DetectionError::Protocol(_))));
    assert!(matches!(det.detect(&frame(), 0), Err(DetectionError::Unavailable(_))));

    let closed = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut det = HttpDetector::new(format!("http://{closed}/"), Duration::from_millis(300));
    assert!(matches!(det.detect(&frame(), 0), Err(DetectionError::Unavailable(_))));
}

fn request() -> MllmRequest {
    MllmRequest::new(
        ConversationId(4),
        vec![HistoryTurn {
            role: Role::User,
            text: "What is this?".into(),
        }],
        vec![RequestImage::new("bottle", frame())],
        "Is it vegan?",
        &FilterPolicy::default(),
    )
    .unwrap()
}

#[test]
fn live_client_wire_format() {
    let (url, rx) = serve(vec![(200, r#"{"text": "Yes."}"#.into(), Duration::ZERO)]);
    let client = LiveClient::new(url, Some("s3cret".into()));
    let reply = client.query(&request()).unwrap();
    assert_eq!(reply.text, "Yes.");
    assert_eq!(reply.backend, "live");
    let req = rx.recv().unwrap();
    assert!(req.head.to_ascii_lowercase().contains("authorization: bearer s3cret"));
    let body: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
    assert_eq!(body["conversation_id"], "c4");
    assert_eq!(body["prompt"], "Is it vegan?");
    assert_eq!(body["history"], serde_json::json!([{"role": "user", "text": "What is this?"}]));
    let png = base64::engine::general_purpose::STANDARD
        .decode(body["images"][0].as_str().unwrap())
        .unwrap();
    assert_eq!(ColorFrame::from_png(&png).unwrap(), frame());
}

#[test]
fn live_client_retries_a_timeout_once() {
    let (url, rx) = serve(vec![
        (200, r#"{"text": "late"}"#.into(), Duration::from_millis(900)),
        (200, r#"{"text": "on time"}"#.into(), Duration::ZERO),
    ]);
    let client = LiveClient::with_timeout(url, None, Duration::from_millis(300));
    assert_eq!(client.query(&request()).unwrap().text, "on time");
    assert_eq!(rx.try_iter().count(), 2);

    let (url, _rx) = serve(vec![(503, "{}".into(), Duration::ZERO)]);
    let client = LiveClient::with_timeout(url, None, Duration::from_millis(300));
    assert!(matches!(client.query(&request()), Err(MllmError::Backend(m)) if m.contains("503")));

    let (url, _rx) = serve(vec![(200, r#"{"answer": 1}"#.into(), Duration::ZERO)]);
    let client = LiveClient::with_timeout(url, None, Duration::from_millis(300));
    assert!(matches!(client.query(&request()), Err(MllmError::Protocol(_))));
}
