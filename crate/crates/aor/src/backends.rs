//! Backend selection strings from the command line.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context};
use aor_core::detection::{Detector, HttpDetector, ScriptedDetector};
use aor_core::mllm::{AuditedClient, LiveClient, MllmClient, MockClient, RecordingClient, ReplayClient};
use aor_core::scene::SceneDirectory;

/// `scripted` or `http:<url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectorSpec {
    Scripted,
    Http(String),
}

impl FromStr for DetectorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "scripted" => Ok(DetectorSpec::Scripted),
            Some(("http", rest)) if !rest.is_empty() => Ok(DetectorSpec::Http(rest.to_string())),
            _ => Err(format!("unknown detector {s:?}; expected scripted or http:<url>")),
        }
    }
}

/// `mock`, `mock:fixed:<text>`, `mock:fail:<message>`, `mock:rules:<file>`,
/// `replay:<store>` or `live:<url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MllmSpec {
    Mock,
    MockFixed(String),
    MockFail(String),
    MockRules(PathBuf),
    Replay(PathBuf),
    Live(String),
}

impl FromStr for MllmSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown mllm backend {s:?}; expected mock[:fixed:<text>|:fail:<msg>|:rules:<file>], replay:<store> or live:<url>");
        if s == "mock" {
            return Ok(MllmSpec::Mock);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        if rest.is_empty() {
            return Err(bad());
        }
        match kind {
            "replay" => Ok(MllmSpec::Replay(rest.into())),
            "live" => Ok(MllmSpec::Live(rest.into())),
            "mock" => match rest.split_once(':') {
                Some(("fixed", t)) => Ok(MllmSpec::MockFixed(t.into())),
                Some(("fail", t)) => Ok(MllmSpec::MockFail(t.into())),
                Some(("rules", p)) if !p.is_empty() => Ok(MllmSpec::MockRules(p.into())),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Token for the live backend, read from `AOR_MLLM_TOKEN`.
pub const TOKEN_ENV: &str = "AOR_MLLM_TOKEN";

pub fn build_detector(spec: &DetectorSpec, scene: &SceneDirectory) -> anyhow::Result<Box<dyn Detector>> {
    Ok(match spec {
        DetectorSpec::Scripted => {
            let Some(rows) = &scene.ground_truth else {
                bail!("scene {} has no detections.jsonl for the scripted detector", scene.path.display());
            };
            Box::new(ScriptedDetector::new(rows.clone()))
        }
        DetectorSpec::Http(url) => Box::new(HttpDetector::new(url.clone(), HttpDetector::DEFAULT_TIMEOUT)),
    })
}

/// The backend, optionally recording into `record`, wrapped in an audit
/// log at `audit`.
pub fn build_client(spec: &MllmSpec, record: Option<&Path>, audit: &Path) -> anyhow::Result<Arc<dyn MllmClient>> {
    let base: Box<dyn MllmClient> = match spec {
        MllmSpec::Mock => Box::new(MockClient::echo()),
        MllmSpec::MockFixed(t) => Box::new(MockClient::fixed(t.clone())),
        MllmSpec::MockFail(m) => Box::new(MockClient::failing(m.clone())),
        MllmSpec::MockRules(p) => Box::new(MockClient::from_rules_file(p)?),
        MllmSpec::Replay(p) => {
            Box::new(ReplayClient::open(p).with_context(|| format!("opening replay store {}", p.display()))?)
        }
        MllmSpec::Live(url) => Box::new(LiveClient::new(url.clone(), std::env::var(TOKEN_ENV).ok())),
    };
    let base: Box<dyn MllmClient> = match record {
        Some(path) => Box::new(RecordingClient::new(base, path)?),
        None => base,
    };
    Ok(Arc::new(AuditedClient::to_file(base, audit)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_specs() {
        assert_eq!("scripted".parse(), Ok(DetectorSpec::Scripted));
        assert_eq!(
            "http:http://localhost:9000/detect".parse(),
            Ok(DetectorSpec::Http("http://localhost:9000/detect".into()))
        );
        assert!("yolo".parse::<DetectorSpec>().is_err());
        assert_eq!("mock".parse(), Ok(MllmSpec::Mock));
        assert_eq!("mock:fixed:a:b".parse(), Ok(MllmSpec::MockFixed("a:b".into())));
        assert_eq!("mock:fail:down".parse(), Ok(MllmSpec::MockFail("down".into())));
        assert_eq!("replay:f.jsonl".parse(), Ok(MllmSpec::Replay("f.jsonl".into())));
        assert_eq!("live:http://x/q".parse(), Ok(MllmSpec::Live("http://x/q".into())));
        for bad in ["", "mock:", "replay:", "mock:other:x", "gpt"] {
            assert!(bad.parse::<MllmSpec>().is_err(), "{bad}");
        }
    }
}
