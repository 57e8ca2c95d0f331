use std::sync::{Arc, OnceLock};

use aor_core::actions::{ActionId, MemorySink, WidgetKind};
use aor_core::anchoring::ProxyState;
use aor_core::geometry::{yaw, CameraIntrinsics, Pose};
use aor_core::ids::{ProxyId, RequestId};
use aor_core::mllm::{CaptureClient, MockClient, MockResponse, MockRule};
use aor_core::session::{
    parse_log, replay, run_headless, to_jsonl, Command, Engine, EventKind, Purpose, SessionConfig, SessionEvent,
    TraceEntry,
};
use aor_core::synth::{SynthObject, SynthScene};
use nalgebra::Vector3;
use serde_json::json;

fn desk() -> Arc<aor_core::scene::SceneDirectory> {
    static SCENE: OnceLock<Arc<aor_core::scene::SceneDirectory>> = OnceLock::new();
    SCENE.get_or_init(render_desk).clone()
}

fn render_desk() -> Arc<aor_core::scene::SceneDirectory> {
    let k = CameraIntrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap();
    let mut s = SynthScene::new(k);
    s.table_y = Some(0.1);
    s.objects = vec![
        SynthObject::new("bottle", [-0.25, 0.0, 1.0], [0.08, 0.2, 0.08], [30, 140, 60]),
        SynthObject::new("cup", [0.2, 0.04, 1.0], [0.08, 0.12, 0.08], [220, 220, 200]),
        SynthObject::new("person", [0.05, -0.2, 1.8], [0.4, 0.6, 0.2], [180, 140, 120]),
    ];
    let poses = [
        Pose::identity(),
        Pose::from_translation(Vector3::new(0.02, 0.0, 0.0)),
        Pose::new(yaw(0.03), Vector3::new(0.03, 0.0, -0.02)).unwrap(),
    ];
    Arc::new(s.to_scene("desk", &poses))
}

fn engine_with(sink: MemorySink) -> Engine {
    let scene = desk();
    let det = aor_core::detection::ScriptedDetector::new(scene.ground_truth.clone().unwrap());
    Engine::new(scene, Box::new(det), Box::new(sink), SessionConfig::default()).unwrap()
}

fn engine() -> Engine {
    engine_with(MemorySink::default())
}

fn kinds(events: &[SessionEvent]) -> Vec<&'static str> {
    events.iter().map(|e| e.kind.name()).collect()
}

fn count(events: &[SessionEvent], name: &str) -> usize {
    events.iter().filter(|e| e.kind.name() == name).count()
}

fn assert_fold_matches(e: &Engine) {
    assert_eq!(&replay(e.log()).unwrap(), e.state());
}

fn cmd(v: serde_json::Value) -> Command {
    serde_json::from_value(v).unwrap()
}

#[test]
fn first_frame_spawns_then_updates() {
    let mut e = engine();
    let f0 = e.step().unwrap();
    assert_eq!(count(&f0, "proxy_spawned"), 2);
    let f1 = e.step().unwrap();
    assert_eq!(count(&f1, "proxy_spawned"), 0);
    assert_eq!(count(&f1, "proxy_updated"), 2);
    assert_eq!(e.state().registry.len(), 2);
    assert_fold_matches(&e);
}

#[test]
fn person_is_suppressed_and_never_sent() {
    let mut e = engine();
    let f0 = e.step().unwrap();
    let EventKind::FrameProcessed(report) = &f0.iter().find(|ev| ev.kind.name() == "frame_processed").unwrap().kind
    else {
        unreachable!()
    };
    assert_eq!(report.suppressed.len(), 1);
    assert_eq!(report.suppressed[0].label, "person");
    for p in [1, 2] {
        e.handle(Command::Select { proxy: ProxyId(p) });
        let out = e.handle(cmd(json!({"type": "dispatch", "proxy": format!("p{p}"), "action": "info"})));
        e.run_jobs(out.jobs, &MockClient::echo());
    }
    for ev in e.log() {
        if let EventKind::MllmRequested { labels, .. } = &ev.kind {
            assert!(!labels.iter().any(|l| l == "person"));
        }
    }
    assert_fold_matches(&e);
}

#[test]
fn invalid_commands_emit_one_error_and_change_nothing() {
    let mut e = engine();
    e.step().unwrap();
    let before = e.state().clone();
    let cases = vec![
        Command::Select { proxy: ProxyId(99) },
        Command::Dismiss { proxy: ProxyId(1) },
        cmd(json!({"type": "dispatch", "proxy": "p1", "action": "timer"})),
        Command::Ask {
            proxy: ProxyId(1),
            question: " ".into(),
        },
        Command::Compare {
            proxies: vec![ProxyId(1)],
            prompt: "Which?".into(),
        },
    ];
    for c in cases {
        let out = e.handle(c);
        assert_eq!(kinds(&out.events), vec!["error"]);
        assert!(out.jobs.is_empty());
    }
    e.handle(Command::Select { proxy: ProxyId(1) });
    let s = e.state().clone();
    let out = e.handle(cmd(json!({"type": "dispatch", "proxy": "p1", "action": "note", "args": {"text": ""}})));
    assert_eq!(kinds(&out.events), vec!["error"]);
    assert_eq!(e.state().registry, s.registry);
    assert_eq!(e.state().widgets, s.widgets);
    assert_eq!(before.registry.len(), e.state().registry.len());
}

#[test]
fn select_opens_exactly_one_conversation() {
    let mut e = engine();
    e.step().unwrap();
    let out = e.handle(Command::Select { proxy: ProxyId(1) });
    let EventKind::StateChanged { opened, .. } = &out.events[0].kind else {
        panic!()
    };
    assert!(opened.is_some());
    e.handle(Command::Dismiss { proxy: ProxyId(1) });
    let out = e.handle(Command::Select { proxy: ProxyId(1) });
    let EventKind::StateChanged { opened, .. } = &out.events[0].kind else {
        panic!()
    };
    assert!(opened.is_none(), "reselect reuses the conversation");
    assert_eq!(e.state().conversations.len(), 1);
}

#[test]
fn dispatch_is_balanced_even_on_failure() {
    let mut e = engine();
    e.step().unwrap();
    e.handle(Command::Select { proxy: ProxyId(1) });
    let out = e.handle(cmd(json!({"type": "dispatch", "proxy": "p1", "action": "info"})));
    assert_eq!(e.state().registry.get(ProxyId(1)).unwrap().state, ProxyState::ActionActive(ActionId::Info));
    let events = e.run_jobs(out.jobs, &MockClient::failing("backend down"));
    assert_eq!(kinds(&events), vec!["mllm_replied", "error", "state_changed"]);
    assert_eq!(e.state().registry.get(ProxyId(1)).unwrap().state, ProxyState::MenuOpen);
    let mut active = 0i32;
    for ev in e.log() {
        if let EventKind::StateChanged { from, to, .. } = &ev.kind {
            active += matches!(to, ProxyState::ActionActive(_)) as i32;
            active -= matches!(from, ProxyState::ActionActive(_)) as i32;
        }
    }
    assert_eq!(active, 0);
    assert_fold_matches(&e);
}

#[test]
fn share_failure_leaves_no_record() {
    let mut e = engine_with(MemorySink {
        fail: true,
        ..MemorySink::default()
    });
    e.step().unwrap();
    e.handle(Command::Select { proxy: ProxyId(1) });
    let out = e.handle(cmd(
        json!({"type": "dispatch", "proxy": "p1", "action": "send_to_contact", "args": {"recipient": "Sam"}}),
    ));
    assert_eq!(kinds(&out.events), vec!["state_changed", "error", "state_changed"]);
    assert!(e.state().shares.is_empty());
}

#[test]
fn share_and_shopping_list() {
    let mut e = engine();
    e.step().unwrap();
    e.handle(Command::Select { proxy: ProxyId(2) });
    let out = e.handle(cmd(
        json!({"type": "dispatch", "proxy": "p2", "action": "send_to_contact", "args": {"recipient": "Sam", "message": "this one"}}),
    ));
    assert_eq!(kinds(&out.events), vec!["state_changed", "shared", "state_changed"]);
    for _ in 0..2 {
        e.handle(cmd(json!({"type": "dispatch", "proxy": "p2", "action": "add_to_shopping_list"})));
    }
    assert_eq!(e.state().shares.len(), 1);
    assert_eq!(e.state().shares[0].proxy.label, "cup");
    assert_eq!(e.state().shopping.len(), 2, "no dedup on the shopping list");
    assert_fold_matches(&e);
}

#[test]
fn countdown_from_answer_fires_once() {
    let mut e = engine();
    e.step().unwrap();
    let client = MockClient::fixed("Cook for 10 minutes");
    e.handle(Command::Select { proxy: ProxyId(1) });
    let out = e.handle(Command::Ask {
        proxy: ProxyId(1),
        question: "how much time do I need to cook this pasta?".into(),
    });
    e.run_jobs(out.jobs, &client);
    e.handle(Command::Select { proxy: ProxyId(2) });
    let out = e.handle(cmd(
        json!({"type": "dispatch", "proxy": "p2", "action": "countdown", "args": {"from_answer_of": "p1"}}),
    ));
    let created = out
        .events
        .iter()
        .find_map(|ev| match &ev.kind {
            EventKind::WidgetCreated(w) => Some(w.clone()),
            _ => None,
        })
        .unwrap();
    assert!(matches!(created.kind, WidgetKind::Countdown { duration_secs: 600, .. }));
    let t0 = e.state().clock_ms;
    assert_eq!(count(&e.advance_clock(t0 + 599_999).unwrap(), "widget_fired"), 0);
    assert_eq!(count(&e.advance_clock(t0 + 600_000).unwrap(), "widget_fired"), 1);
    for i in 1..=100 {
        assert_eq!(count(&e.advance_clock(t0 + 600_000 + i * 1000).unwrap(), "widget_fired"), 0);
    }
    assert!(e.advance_clock(t0).is_err(), "clock regression");
    assert_fold_matches(&e);
}

#[test]
fn compare_which_marks_the_matches() {
    let mut e = engine();
    e.step().unwrap();
    let client = CaptureClient::new(MockClient::with_rules(vec![
        MockRule {
            when: Some("ONLY the correct indices".into()),
            then: MockResponse::Fixed("1".into()),
        },
        MockRule {
            when: None,
            then: MockResponse::Fixed("The cup on the right.".into()),
        },
    ]));
    let out = e.handle(Command::Compare {
        proxies: vec![ProxyId(2), ProxyId(1)],
        prompt: "Which of these contains milk?".into(),
    });
    let events = e.run_jobs(out.jobs, &client);
    assert_eq!(client.requests().len(), 2);
    let completed = events.iter().find(|ev| ev.kind.name() == "comparer_completed").unwrap();
    let EventKind::ComparerCompleted { indices, marked, .. } = &completed.kind else {
        unreachable!()
    };
    // bottle is left of the cup on screen, so index 1 is the cup
    assert_eq!(indices.as_deref(), Some(&[1][..]));
    assert_eq!(marked.as_deref(), Some(&[ProxyId(2)][..]));
    assert_eq!(e.state().registry.marked(), vec![ProxyId(2)]);
    let second = &client.requests()[1];
    assert_eq!(second.history().len(), 2);
    assert_fold_matches(&e);

    let out = e.handle(Command::Compare {
        proxies: vec![ProxyId(1), ProxyId(2)],
        prompt: "Compare these.".into(),
    });
    e.run_jobs(out.jobs, &client);
    assert_eq!(client.requests().len(), 3);
    assert_eq!(e.state().registry.marked(), vec![ProxyId(2)]);
}

#[test]
fn second_compare_while_running_is_rejected() {
    let mut e = engine();
    e.step().unwrap();
    let c = Command::Compare {
        proxies: vec![ProxyId(1), ProxyId(2)],
        prompt: "Compare.".into(),
    };
    let first = e.handle(c.clone());
    assert_eq!(first.jobs.len(), 1);
    let second = e.handle(c);
    assert_eq!(kinds(&second.events), vec!["error"]);
    e.run_jobs(first.jobs, &MockClient::echo());
    assert!(e.state().active_job.is_none());
}

#[test]
fn finished_session_rejects_commands() {
    let mut e = engine();
    e.step().unwrap();
    e.finish();
    let out = e.handle(Command::Select { proxy: ProxyId(1) });
    assert_eq!(kinds(&out.events), vec!["error"]);
    assert!(e.step().is_err());
    assert_fold_matches(&e);
}

#[test]
fn unknown_reply_is_an_error_event() {
    let mut e = engine();
    let out = e.complete(RequestId(42), Ok("?".into()));
    assert_eq!(kinds(&out.events), vec!["error"]);
}

#[test]
fn snapshot_after_any_prefix_equals_fold() {
    let mut e = engine();
    let trace: Vec<TraceEntry> = vec![
        TraceEntry {
            at_frame: 0,
            command: Some(Command::Select { proxy: ProxyId(1) }),
            advance_ms: None,
        },
        TraceEntry {
            at_frame: 1,
            command: Some(cmd(json!({"type": "dispatch", "proxy": "p1", "action": "timer"}))),
            advance_ms: None,
        },
        TraceEntry {
            at_frame: 2,
            command: None,
            advance_ms: Some(5000),
        },
    ];
    run_headless(&mut e, &MockClient::echo(), &trace).unwrap();
    let log = e.log().to_vec();
    for n in 0..=log.len() {
        let s = replay(&log[..n]).unwrap();
        assert_eq!(s.last_seq, n as u64);
    }
    let text = to_jsonl(&log);
    let parsed = parse_log(&text).unwrap();
    assert_eq!(parsed, log);
    assert_eq!(&replay(&parsed).unwrap(), e.state());
    assert_eq!(to_jsonl(&parsed), text, "log roundtrip is byte-exact");
    let snap = e.snapshot();
    assert_eq!(snap.widgets.len(), 1);
    assert_eq!(snap.widgets[0].clock.as_deref(), Some("0:05"));
    assert!(snap.proxies.iter().all(|p| p.screen.is_some()));
}

#[test]
fn replay_validator_names_first_bad_event() {
    assert_eq!(replay(&[]).unwrap(), aor_core::session::SessionState::default());
    let mut e = engine();
    e.step().unwrap();
    e.handle(Command::Select { proxy: ProxyId(1) });
    let mut log = e.log().to_vec();

    let mut gap = log.clone();
    gap.remove(2);
    assert_eq!(replay(&gap).unwrap_err().seq, 4);

    // a bubble cannot jump straight into an action
    let last = log.len() - 1;
    if let EventKind::StateChanged { to, .. } = &mut log[last].kind {
        *to = ProxyState::ActionActive(ActionId::Timer);
    }
    let err = replay(&log).unwrap_err();
    assert_eq!(err.seq, log[last].seq);
    assert!(err.reason.contains("illegal"), "{err}");
}

#[test]
fn forged_denylisted_request_fails_validation() {
    let mut e = engine();
    e.step().unwrap();
    e.handle(Command::Select { proxy: ProxyId(1) });
    let out = e.handle(cmd(json!({"type": "dispatch", "proxy": "p1", "action": "info"})));
    assert_eq!(out.jobs.len(), 1);
    let mut log = e.log().to_vec();
    let last = log.len() - 1;
    if let EventKind::MllmRequested { labels, purpose, .. } = &mut log[last].kind {
        assert_eq!(*purpose, Purpose::Info);
        labels[0] = "person".into();
    }
    assert!(replay(&log).unwrap_err().reason.contains("denylisted"));
}

#[test]
fn event_wire_shape() {
    let mut e = engine();
    e.step().unwrap();
    e.step().unwrap();
    let lines: Vec<serde_json::Value> = e.log().iter().map(|ev| serde_json::to_value(ev).unwrap()).collect();
    assert_eq!(lines[0]["kind"], "session_started");
    assert_eq!(lines[0]["seq"], 1);
    let tick = lines.iter().find(|l| l["kind"] == "ticked").unwrap();
    assert_eq!(tick["at_ms"], 33);
    assert!(tick.get("payload").is_none());
    let spawn = lines.iter().find(|l| l["kind"] == "proxy_spawned").unwrap();
    assert_eq!(spawn["payload"]["id"], "p1");
}
