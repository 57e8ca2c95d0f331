use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::actions::{SharePayload, ShoppingEntry, WidgetBoard, WidgetKind};
use crate::anchoring::{ProxyRegistry, ProxyState};
use crate::comparer::{ComparerAnswer, StitchedInfo};
use crate::conversation::{ConversationStore, ImageRef};
use crate::ids::{ConversationId, JobId, ProxyId, RequestId};

use super::events::{EventKind, Purpose, SessionEvent, SessionInfo, ShareRecord};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("event {seq}: {reason}")]
pub struct ApplyError {
    pub seq: u64,
    pub reason: String,
}

/// A request that has been sent and not yet answered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub conversation: ConversationId,
    pub proxy: Option<ProxyId>,
    pub purpose: Purpose,
    pub job: Option<JobId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveJob {
    pub id: JobId,
    pub conversation: ConversationId,
    pub proxies: Vec<ProxyId>,
    pub prompt: String,
    pub stitched: StitchedInfo,
    pub origin: Option<ProxyId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedJob {
    pub id: JobId,
    pub proxies: Vec<ProxyId>,
    pub prompt: String,
    pub answer: ComparerAnswer,
    pub indices: Option<Vec<usize>>,
}

/// Everything a session knows, as the left fold of its events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub info: Option<SessionInfo>,
    pub last_seq: u64,
    pub clock_ms: u64,
    /// Most recent frame processed.
    pub frame: Option<usize>,
    pub registry: ProxyRegistry,
    pub conversations: ConversationStore,
    pub widgets: WidgetBoard,
    pub pending: BTreeMap<RequestId, PendingRequest>,
    pub last_request: u32,
    pub active_job: Option<ActiveJob>,
    pub jobs: Vec<CompletedJob>,
    pub shares: Vec<SharePayload>,
    pub shopping: Vec<ShoppingEntry>,
    pub errors: u64,
    pub finished: bool,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_request(&self) -> RequestId {
        RequestId(self.last_request + 1)
    }

    pub fn next_job(&self) -> JobId {
        let done = self.jobs.len() as u32 + u32::from(self.active_job.is_some());
        JobId(done + 1)
    }

    /// Apply one event. On error the state is left as it was.
    pub fn apply(&mut self, ev: &SessionEvent) -> Result<(), ApplyError> {
        let mut next = self.clone();
        next.apply_in_place(ev).map_err(|reason| ApplyError { seq: ev.seq, reason })?;
        *self = next;
        Ok(())
    }

    /// Apply without the rollback copy. Callers must discard the state on
    /// error.
    pub(crate) fn apply_in_place(&mut self, ev: &SessionEvent) -> Result<(), String> {
        if ev.seq != self.last_seq + 1 {
            return Err(format!("expected seq {}, got {}", self.last_seq + 1, ev.seq));
        }
        if self.info.is_none() && !matches!(ev.kind, EventKind::SessionStarted(_)) {
            return Err("log must start with session_started".into());
        }
        if self.finished && !matches!(ev.kind, EventKind::Error { .. }) {
            return Err(format!("{} after session_finished", ev.kind.name()));
        }
        match &ev.kind {
            EventKind::Ticked => {
                if ev.at_ms <= self.clock_ms {
                    return Err(format!("tick to {} does not advance clock {}", ev.at_ms, self.clock_ms));
                }
            }
            _ if ev.at_ms != self.clock_ms => {
                return Err(format!("timestamp {} differs from clock {}", ev.at_ms, self.clock_ms));
            }
            _ => {}
        }
        self.last_seq = ev.seq;
        match &ev.kind {
            EventKind::SessionStarted(info) => {
                if self.info.is_some() {
                    return Err("duplicate session_started".into());
                }
                self.registry = ProxyRegistry::new(info.dedup_radius);
                self.info = Some(info.clone());
            }
            EventKind::Ticked => {
                self.widgets.tick(ev.at_ms).map_err(|e| e.to_string())?;
                self.clock_ms = ev.at_ms;
            }
            EventKind::FrameProcessed(report) => {
                if self.frame.is_some_and(|f| report.frame <= f) {
                    return Err(format!("frame {} does not advance past {:?}", report.frame, self.frame));
                }
                self.frame = Some(report.frame);
            }
            EventKind::ProxySpawned {
                id,
                label,
                world_pos,
                crop,
                frame,
            } => {
                if self.registry.find_match(label, world_pos).is_some() {
                    return Err(format!("spawn of {id} duplicates an existing {label}"));
                }
                self.registry
                    .spawn(*id, label, *world_pos, *crop, *frame)
                    .map_err(|e| e.to_string())?;
            }
            EventKind::ProxyUpdated { id, frame, crop } => {
                self.registry.touch(*id, *frame, *crop).map_err(|e| e.to_string())?;
            }
            EventKind::StateChanged { id, from, to, opened } => {
                let current = self.registry.check_transition(*id, *to).map_err(|e| e.to_string())?;
                if current != *from {
                    return Err(format!("proxy {id} is {current}, event says {from}"));
                }
                let existing = self.registry.get(*id).and_then(|p| p.conversation);
                match (existing, opened) {
                    (None, Some(c)) => {
                        let p = self.registry.get(*id).expect("checked above").clone();
                        self.conversations
                            .open(
                                *c,
                                Some(*id),
                                Some(ImageRef::Crop {
                                    proxy: *id,
                                    crop: p.crop,
                                }),
                            )
                            .map_err(|e| e.to_string())?;
                        self.registry.set_conversation(*id, *c).map_err(|e| e.to_string())?;
                    }
                    (Some(_), Some(c)) => return Err(format!("proxy {id} already has a conversation, got {c}")),
                    (None, None) if *from == ProxyState::Bubble => {
                        return Err(format!("proxy {id} left the bubble state without a conversation"))
                    }
                    _ => {}
                }
                self.registry.transition(*id, *to).map_err(|e| e.to_string())?;
            }
            EventKind::MllmRequested {
                request,
                conversation,
                proxy,
                purpose,
                prompt,
                images,
                labels,
                ..
            } => {
                let denylist = &self.info.as_ref().expect("checked above").denylist;
                if let Some(l) = labels.iter().find(|l| denylist.contains(l)) {
                    return Err(format!("request {request} carries denylisted label {l:?}"));
                }
                if *request != self.next_request() {
                    return Err(format!("request {request} out of sequence"));
                }
                let job = match purpose {
                    Purpose::Compare | Purpose::CompareIndices => {
                        let job = self.active_job.as_ref().ok_or("comparer request without a job")?;
                        if job.conversation != *conversation {
                            return Err(format!("request {request} not on the job's conversation"));
                        }
                        Some(job.id)
                    }
                    Purpose::Info | Purpose::Ask => {
                        let p = proxy.ok_or("info/ask request without a proxy")?;
                        let conv = self.registry.get(p).and_then(|x| x.conversation);
                        if conv != Some(*conversation) {
                            return Err(format!("request {request} not on proxy {p}'s conversation"));
                        }
                        None
                    }
                };
                self.conversations
                    .push_user(*conversation, prompt.clone(), images.clone())
                    .map_err(|e| e.to_string())?;
                self.pending.insert(
                    *request,
                    PendingRequest {
                        conversation: *conversation,
                        proxy: *proxy,
                        purpose: *purpose,
                        job,
                    },
                );
                self.last_request = request.0;
            }
            EventKind::MllmReplied {
                request,
                conversation,
                ok,
                text,
                refined_label,
            } => {
                let pending = self.pending.remove(request).ok_or(format!("reply to unknown request {request}"))?;
                if pending.conversation != *conversation {
                    return Err(format!("reply to {request} on the wrong conversation"));
                }
                self.conversations
                    .push_assistant(*conversation, text.clone(), !ok)
                    .map_err(|e| e.to_string())?;
                if let Some(label) = refined_label {
                    let p = pending.proxy.ok_or("refined label without a proxy")?;
                    self.registry.set_refined_label(p, label.clone()).map_err(|e| e.to_string())?;
                }
            }
            EventKind::ComparerStarted {
                job,
                conversation,
                proxies,
                prompt,
                stitched,
                origin,
            } => {
                if self.active_job.is_some() {
                    return Err("a comparer job is already running".into());
                }
                if *job != self.next_job() {
                    return Err(format!("job {job} out of sequence"));
                }
                if let Some(missing) = proxies.iter().find(|p| !self.registry.contains(**p)) {
                    return Err(format!("unknown proxy {missing}"));
                }
                self.conversations
                    .open(
                        *conversation,
                        None,
                        Some(ImageRef::Stitched {
                            proxies: proxies.clone(),
                            width: stitched.width,
                            height: stitched.height,
                            sha256: stitched.sha256.clone(),
                        }),
                    )
                    .map_err(|e| e.to_string())?;
                self.active_job = Some(ActiveJob {
                    id: *job,
                    conversation: *conversation,
                    proxies: proxies.clone(),
                    prompt: prompt.clone(),
                    stitched: stitched.clone(),
                    origin: *origin,
                });
            }
            EventKind::ComparerCompleted {
                job,
                answer,
                indices,
                marked,
                ..
            } => {
                let active = self.active_job.take().ok_or("no comparer job running")?;
                if active.id != *job {
                    return Err(format!("completed {job} but {} is running", active.id));
                }
                if self.pending.values().any(|p| p.job == Some(*job)) {
                    return Err(format!("job {job} completed with a request outstanding"));
                }
                if let Some(ids) = marked {
                    self.registry.mark(ids).map_err(|e| e.to_string())?;
                }
                self.jobs.push(CompletedJob {
                    id: *job,
                    proxies: active.proxies,
                    prompt: active.prompt,
                    answer: answer.clone(),
                    indices: indices.clone(),
                });
            }
            EventKind::WidgetCreated(widget) => {
                if !self.registry.contains(widget.proxy) {
                    return Err(format!("widget on unknown proxy {}", widget.proxy));
                }
                self.widgets.insert(widget.clone())?;
            }
            EventKind::WidgetFired { id, proxy } => {
                let w = self.widgets.get(*id).ok_or(format!("unknown widget {id}"))?;
                match w.kind {
                    WidgetKind::Countdown {
                        fired: true,
                        remaining_ms: 0,
                        ..
                    } if w.proxy == *proxy => {}
                    _ => return Err(format!("widget {id} has not expired")),
                }
            }
            EventKind::Shared(ShareRecord::Contact(payload)) => {
                if payload.recipient.trim().is_empty() {
                    return Err("empty recipient".into());
                }
                self.shares.push(payload.clone());
            }
            EventKind::Shared(ShareRecord::ShoppingList(entry)) => {
                self.shopping.push(entry.clone());
            }
            EventKind::Error { .. } => self.errors += 1,
            EventKind::SessionFinished => self.finished = true,
        }
        Ok(())
    }
}

/// Fold a whole log, failing on the first invalid event.
pub fn replay(events: &[SessionEvent]) -> Result<SessionState, ApplyError> {
    let mut state = SessionState::new();
    for ev in events {
        state
            .apply_in_place(ev)
            .map_err(|reason| ApplyError { seq: ev.seq, reason })?;
    }
    Ok(state)
}

/// Parse a JSONL event log. Blank lines are skipped.
pub fn parse_log(text: &str) -> Result<Vec<SessionEvent>, ApplyError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ev: SessionEvent = serde_json::from_str(line).map_err(|e| ApplyError {
            seq: out.last().map_or(1, |e: &SessionEvent| e.seq + 1),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(ev);
    }
    Ok(out)
}
