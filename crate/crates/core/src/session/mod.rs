//! Event-sourced session: the per-frame pipeline and user commands, applied
//! through one ordered event log.

mod engine;
mod events;
mod snapshot;
mod state;
mod trace;

use serde::{Deserialize, Serialize};

use crate::actions::ActionId;
use crate::ids::ProxyId;
use crate::mllm::MllmClient;

pub use engine::{Engine, EngineError, MllmJob, Outcome, SessionConfig, StepTiming};
pub use events::{
    EventKind, FrameReport, NoDepthNotice, Purpose, SessionEvent, SessionInfo, ShareRecord, SuppressedNotice,
};
pub use snapshot::{snapshot, ProxyView, Snapshot, WidgetView};
pub use state::{parse_log, replay, ActiveJob, ApplyError, CompletedJob, PendingRequest, SessionState};
pub use trace::{load_trace, parse_trace, TraceEntry, TraceError};

/// A user request from the viewer or a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Select {
        proxy: ProxyId,
    },
    Dismiss {
        proxy: ProxyId,
    },
    Dispatch {
        proxy: ProxyId,
        action: ActionId,
        #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
        args: serde_json::Value,
    },
    Compare {
        proxies: Vec<ProxyId>,
        prompt: String,
    },
    Ask {
        proxy: ProxyId,
        question: String,
    },
}

/// Drive a session headlessly: every frame in order, trace entries after
/// the frame they name, MLLM jobs run to completion in between. Entries
/// naming frames past the end run after the last frame.
pub fn run_headless(
    engine: &mut Engine,
    client: &dyn MllmClient,
    trace: &[TraceEntry],
) -> Result<(), EngineError> {
    let mut pending = trace.iter().peekable();
    while engine.frames_remaining() > 0 {
        let frame = engine.next_frame();
        engine.step()?;
        while let Some(entry) = pending.next_if(|e| e.at_frame <= frame) {
            run_entry(engine, client, entry)?;
        }
    }
    for entry in pending {
        run_entry(engine, client, entry)?;
    }
    engine.finish();
    Ok(())
}

fn run_entry(engine: &mut Engine, client: &dyn MllmClient, entry: &TraceEntry) -> Result<(), EngineError> {
    if let Some(cmd) = &entry.command {
        let out = engine.handle(cmd.clone());
        engine.run_jobs(out.jobs, client);
    }
    if let Some(ms) = entry.advance_ms {
        let now = engine.state().clock_ms + ms;
        engine.advance_clock(now)?;
    }
    Ok(())
}

/// Serialize events as JSON lines.
pub fn to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("events serialize"));
        out.push('\n');
    }
    out
}
