//! Regenerate the fixture scenes, the scripted kitchen trace, the mock
//! rules and the replay store recorded from them.
//!
//! cargo run -p aor-core --release --example make_fixtures [fixtures-dir]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use aor_core::actions::MemorySink;
use aor_core::detection::ScriptedDetector;
use aor_core::geometry::{yaw, CameraIntrinsics, Pose};
use aor_core::mllm::{MockClient, MockResponse, MockRule, RecordingClient};
use aor_core::scene::{load_scene, write_scene, SceneContent};
use aor_core::session::{load_trace, run_headless, Engine, SessionConfig};
use aor_core::synth::{SynthObject, SynthScene};
use nalgebra::Vector3;

fn synthetic() -> (SynthScene, Vec<Pose>) {
    let k = CameraIntrinsics::new(300.0, 300.0, 159.5, 119.5, 320, 240).unwrap();
    let mut s = SynthScene::new(k);
    s.wall_z = Some(3.0);
    s.objects = vec![
        SynthObject::new("cup", [0.4, 0.0, 2.0], [0.04, 0.04, 0.04], [210, 60, 40]),
        SynthObject::new("bottle", [-0.3, -0.05, 1.5], [0.08, 0.25, 0.08], [40, 120, 200]),
    ];
    let poses = vec![
        Pose::identity(),
        Pose::from_translation(Vector3::new(0.05, 0.0, 0.0)),
        Pose::new(yaw(0.06), Vector3::new(0.1, 0.0, 0.05)).unwrap(),
    ];
    (s, poses)
}

fn kitchen() -> (SynthScene, Vec<Pose>) {
    let k = CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640, 480).unwrap();
    let mut s = SynthScene::new(k);
    s.table_y = Some(0.15);
    s.wall_z = Some(2.8);
    let on_table = |h: f64| 0.15 - h / 2.0;
    s.objects = vec![
        // front row
        SynthObject::new("bottle", [-0.45, on_table(0.22), 1.0], [0.07, 0.22, 0.07], [60, 30, 20]),
        SynthObject::new("book", [-0.12, on_table(0.2), 1.0], [0.15, 0.2, 0.05], [230, 200, 60]),
        SynthObject::new("bowl", [0.28, on_table(0.1), 1.0], [0.22, 0.1, 0.22], [120, 120, 130]),
        // back row
        SynthObject::new("bottle", [-0.43, on_table(0.3), 1.5], [0.09, 0.3, 0.09], [250, 150, 30]),
        SynthObject::new("cup", [0.12, on_table(0.22), 1.5], [0.08, 0.22, 0.08], [240, 240, 235]),
        SynthObject::new("cup", [0.72, on_table(0.14), 1.5], [0.07, 0.14, 0.07], [200, 120, 170]),
        // not sent anywhere
        SynthObject::new("person", [-1.2, -0.25, 2.6], [0.45, 0.9, 0.3], [180, 140, 120]).with_confidence(0.95),
        SynthObject::new("wine glass", [0.0, on_table(0.12), 0.72], [0.06, 0.12, 0.06], [215, 225, 235])
            .with_depth_hole(),
        SynthObject::new("remote", [0.45, on_table(0.02), 0.85], [0.16, 0.02, 0.05], [25, 25, 25]).with_confidence(0.3),
    ];
    let poses = (0..6)
        .map(|i| {
            let i = f64::from(i);
            Pose::new(yaw(-0.004 * i), Vector3::new(0.012 * i, 0.0, -0.01 * i)).unwrap()
        })
        .collect();
    (s, poses)
}

fn write(root: &Path, name: &str, scene: &SynthScene, poses: &[Pose]) {
    let mut frames = Vec::new();
    let mut dets = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let r = scene.render(pose, i);
        println!("{name} frame {i}:");
        for d in &r.detections {
            println!("  {:<10} {}", d.label, d.bbox);
        }
        dets.extend(r.detections);
        frames.push((r.color, r.depth_mm, *pose));
    }
    let dir = root.join("scenes").join(name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    write_scene(
        &dir,
        &SceneContent {
            name,
            intrinsics: scene.intrinsics,
            frames: &frames,
            detections: Some(&dets),
        },
    )
    .unwrap();
}

const RULES: &str = r#"[
  {"when": "ONLY the correct indices", "then": {"fixed": "1, 2"}},
  {"when": "contain lactose", "then": {"fixed": "The milk and the yogurt drink contain lactose. The orange juice does not."}},
  {"when": "Compare the prices", "then": {"fixed": "Orange juice: $3.49 (1 L). Milk: $2.19 (1 L). The milk is cheaper."}},
  {"when": "Provide the information", "then": {"fixed": "Superior Dark Soy Sauce * Price: $3.49 (Kroger, 4.6/5) * Cheaper alternatives: Kikkoman - $2.99 * Main ingredients: water, soybeans * Calories: 10 per tbsp * Allergens: soy, wheat"}},
  {"when": "cook this pasta", "then": {"fixed": "Cook for 10 minutes."}}
]
"#;

const TRACE: &str = r#"{"at_frame":0,"command":{"type":"select","proxy":"p99"}}
{"at_frame":1,"command":{"type":"select","proxy":"p4"}}
{"at_frame":1,"command":{"type":"dispatch","proxy":"p4","action":"compare","args":{"with":["p5","p6"],"prompt":"Which of these products contain lactose?"}}}
{"at_frame":2,"command":{"type":"compare","proxies":["p4","p5"],"prompt":"Compare the prices of these two drinks."}}
{"at_frame":2,"command":{"type":"dispatch","proxy":"p4","action":"send_to_contact","args":{"recipient":"Alex","message":"Can you pick up this juice?"}}}
{"at_frame":2,"command":{"type":"select","proxy":"p5"}}
{"at_frame":2,"command":{"type":"dispatch","proxy":"p5","action":"add_to_shopping_list"}}
{"at_frame":3,"command":{"type":"select","proxy":"p1"}}
{"at_frame":3,"command":{"type":"dispatch","proxy":"p1","action":"info"}}
{"at_frame":3,"command":{"type":"dismiss","proxy":"p1"}}
{"at_frame":4,"command":{"type":"select","proxy":"p3"}}
{"at_frame":4,"command":{"type":"dispatch","proxy":"p3","action":"note","args":{"text":"Soak the beans overnight","visibility":{"group":"family"}}}}
{"at_frame":4,"command":{"type":"dispatch","proxy":"p3","action":"timer"}}
{"at_frame":5,"command":{"type":"select","proxy":"p2"}}
{"at_frame":5,"command":{"type":"ask","proxy":"p2","question":"How much time do I need to cook this pasta?"}}
{"at_frame":5,"command":{"type":"dispatch","proxy":"p3","action":"countdown","args":{"from_answer_of":"p2"}}}
{"at_frame":5,"advance_ms":600000}
{"at_frame":5,"advance_ms":1000}
"#;

fn main() {
    let root: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"));
    let (s, p) = synthetic();
    write(&root, "synthetic", &s, &p);
    let (s, p) = kitchen();
    write(&root, "kitchen", &s, &p);

    for sub in ["mllm", "traces"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    let rules_path = root.join("mllm/kitchen.rules.json");
    std::fs::write(&rules_path, RULES).unwrap();
    let trace_path = root.join("traces/kitchen-tasks.jsonl");
    std::fs::write(&trace_path, TRACE).unwrap();

    let store_path = root.join("mllm/kitchen.jsonl");
    if store_path.exists() {
        std::fs::remove_file(&store_path).unwrap();
    }
    let scene = Arc::new(load_scene(root.join("scenes/kitchen")).unwrap());
    let det = ScriptedDetector::new(scene.ground_truth.clone().unwrap());
    let mut engine = Engine::new(scene, Box::new(det), Box::new(MemorySink::default()), SessionConfig::default()).unwrap();
    let rules: Vec<MockRule> = serde_json::from_str(RULES).unwrap();
    assert!(rules.iter().all(|r| matches!(r.then, MockResponse::Fixed(_))));
    let client = RecordingClient::new(MockClient::with_rules(rules), &store_path).unwrap();
    run_headless(&mut engine, &client, &load_trace(&trace_path).unwrap()).unwrap();
    println!("recorded {} replies; {} events", client.store().len(), engine.log().len());
    for ev in engine.log() {
        if let aor_core::session::EventKind::Error { reason, .. } = &ev.kind {
            println!("  error at seq {}: {reason}", ev.seq);
        }
    }
}
