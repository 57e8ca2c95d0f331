use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Command;

/// One line of a scripted interaction: after frame `at_frame` has been
/// processed, either submit a command or advance the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub at_frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advance_ms: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("trace line {line}: {message}")]
    Invalid { line: usize, message: String },
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>, TraceError> {
    let mut out: Vec<TraceEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: TraceEntry = serde_json::from_str(raw).map_err(|e| TraceError::Invalid {
            line,
            message: e.to_string(),
        })?;
        if entry.command.is_some() == entry.advance_ms.is_some() {
            return Err(TraceError::Invalid {
                line,
                message: "exactly one of `command` or `advance_ms` is required".into(),
            });
        }
        if out.last().is_some_and(|prev| prev.at_frame > entry.at_frame) {
            return Err(TraceError::Invalid {
                line,
                message: "at_frame must not decrease".into(),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceEntry>, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace(&text)
}
