//! Shared session setup and the headless runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use aor_core::actions::FileOutbox;
use aor_core::detection::FilterPolicy;
use aor_core::mllm::MllmClient;
use aor_core::scene::{load_scene, SceneDirectory};
use aor_core::session::{
    load_trace, run_headless, to_jsonl, Engine, SessionConfig, SessionState, StepTiming, TraceEntry,
};

use crate::backends::{build_client, build_detector, DetectorSpec, MllmSpec};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scene: PathBuf,
    pub detector: DetectorSpec,
    pub mllm: MllmSpec,
    pub record: Option<PathBuf>,
    pub dedup_radius: f64,
    pub min_confidence: f64,
    pub trace: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub session_id: String,
    pub detect_every: usize,
    pub cadence_ms: u64,
}

impl RunOptions {
    pub fn new(scene: impl Into<PathBuf>, mllm: MllmSpec) -> Self {
        let d = SessionConfig::default();
        Self {
            scene: scene.into(),
            detector: DetectorSpec::Scripted,
            mllm,
            record: None,
            dedup_radius: d.dedup_radius,
            min_confidence: d.policy.min_confidence(),
            trace: None,
            data_dir: PathBuf::from("."),
            session_id: d.session_id,
            detect_every: d.detect_every,
            cadence_ms: d.cadence_ms,
        }
    }

    pub fn state_dir(&self) -> PathBuf {
        self.data_dir.join("state")
    }

    pub fn events_path(&self) -> PathBuf {
        self.state_dir().join(format!("session-{}.events.jsonl", self.session_id))
    }

    pub fn state_path(&self) -> PathBuf {
        self.state_dir().join(format!("session-{}.state.json", self.session_id))
    }

    pub fn timings_path(&self) -> PathBuf {
        self.state_dir().join(format!("session-{}.timings.jsonl", self.session_id))
    }

    pub fn audit_path(&self) -> PathBuf {
        self.state_dir().join("mllm-audit.jsonl")
    }
}

/// Everything a session needs, built from options.
pub struct Prepared {
    pub engine: Engine,
    pub client: Arc<dyn MllmClient>,
    pub trace: Vec<TraceEntry>,
}

pub fn prepare(opts: &RunOptions) -> anyhow::Result<Prepared> {
    if opts.session_id.is_empty() || !opts.session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        anyhow::bail!("session id must be non-empty and use only [A-Za-z0-9_-]");
    }
    let scene: Arc<SceneDirectory> =
        Arc::new(load_scene(&opts.scene).with_context(|| format!("loading scene {}", opts.scene.display()))?);
    let detector = build_detector(&opts.detector, &scene)?;
    fs::create_dir_all(opts.state_dir())?;
    let client = build_client(&opts.mllm, opts.record.as_deref(), &opts.audit_path())?;
    let config = SessionConfig {
        session_id: opts.session_id.clone(),
        policy: FilterPolicy::default().with_min_confidence(opts.min_confidence)?,
        dedup_radius: opts.dedup_radius,
        detect_every: opts.detect_every,
        cadence_ms: opts.cadence_ms,
        ..SessionConfig::default()
    };
    let engine = Engine::new(scene, detector, Box::new(FileOutbox::new(&opts.data_dir)), config)?;
    let trace = match &opts.trace {
        Some(p) => load_trace(p)?,
        None => Vec::new(),
    };
    Ok(Prepared { engine, client, trace })
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub events_path: PathBuf,
    pub state_path: PathBuf,
    pub events: usize,
    pub errors: u64,
    pub proxies: usize,
}

/// Pretty JSON of a folded state, as written to `.state.json`.
pub fn state_json(state: &SessionState) -> String {
    let mut s = serde_json::to_string_pretty(state).expect("state serializes");
    s.push('\n');
    s
}

fn write_timings(path: &Path, timings: &[StepTiming]) -> std::io::Result<()> {
    let mut out = String::new();
    for t in timings {
        out.push_str(&serde_json::to_string(t).expect("timing serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Run every frame and the trace without a viewer, then write the event
/// log, final state and step timings.
pub fn run(opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let Prepared {
        mut engine,
        client,
        trace,
    } = prepare(opts)?;
    run_headless(&mut engine, client.as_ref(), &trace)?;
    fs::write(opts.events_path(), to_jsonl(engine.log()))?;
    fs::write(opts.state_path(), state_json(engine.state()))?;
    write_timings(&opts.timings_path(), engine.timings())?;
    Ok(RunSummary {
        events_path: opts.events_path(),
        state_path: opts.state_path(),
        events: engine.log().len(),
        errors: engine.state().errors,
        proxies: engine.state().registry.len(),
    })
}

/// Fold a log file into its final state.
pub fn replay_file(log: &Path) -> anyhow::Result<SessionState> {
    let text = fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let events = aor_core::session::parse_log(&text)?;
    Ok(aor_core::session::replay(&events)?)
}
