//! Per-frame step timings on the 640x480 kitchen scene.
//!
//! cargo bench -p aor --bench pipeline [-- <passes>]

use std::path::Path;
use std::sync::Arc;

use aor_core::actions::MemorySink;
use aor_core::detection::ScriptedDetector;
use aor_core::scene::load_scene;
use aor_core::session::{Engine, SessionConfig};

fn percentile(sorted: &[u64], p: f64) -> u64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

fn main() {
    let passes: usize = std::env::args()
        .skip(1)
        .find_map(|a| a.parse().ok())
        .unwrap_or(200);
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenes/kitchen");
    let scene = Arc::new(load_scene(&dir).expect("kitchen fixture loads"));
    let gt = scene.ground_truth.clone().expect("kitchen has ground truth");
    let (mut core, mut detector) = (Vec::new(), Vec::new());
    for _ in 0..passes {
        let det = ScriptedDetector::new(gt.clone());
        let mut e = Engine::new(Arc::clone(&scene), Box::new(det), Box::new(MemorySink::default()), SessionConfig::default())
            .expect("default config is valid");
        while e.frames_remaining() > 0 {
            e.step().expect("step");
        }
        for t in e.timings() {
            core.push(t.core_us);
            detector.push(t.detector_us);
        }
    }
    core.sort_unstable();
    detector.sort_unstable();
    println!(
        "pipeline {}x{}, {} steps",
        scene.intrinsics.width,
        scene.intrinsics.height,
        core.len()
    );
    for (name, v) in [("core", &core), ("detector", &detector)] {
        println!(
            "{name:<9} p50 {:>6} us   p95 {:>6} us   max {:>6} us",
            percentile(v, 0.5),
            percentile(v, 0.95),
            v[v.len() - 1]
        );
    }
}
