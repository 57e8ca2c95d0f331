use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actions::{
    countdown_seconds, parse_duration_secs, ActionArgs, ActionError, CountdownSource, ProxySnapshot,
    ShareSink, SharePayload, ShoppingEntry,
};
use crate::anchoring::{localize, ProxyState, UpsertPlan};
use crate::comparer::{
    extract_indices, indexing_reprompt, is_which_question, prepare, stitched_info, CompareItem, ComparerAnswer,
};
use crate::conversation::{refined_label_from_summary, ImageRef, INFO_SUMMARY, ASK};
use crate::detection::{apply_policy, Detector, FilterPolicy};
use crate::geometry::{project, DEFAULT_DEPTH_WINDOW};
use crate::ids::{JobId, ProxyId, RequestId};
use crate::mllm::{MllmClient, MllmRequest, RequestImage};
use crate::scene::SceneDirectory;

use super::events::{
    EventKind, FrameReport, NoDepthNotice, Purpose, SessionEvent, SessionInfo, ShareRecord, SuppressedNotice,
};
use super::snapshot::{snapshot, Snapshot};
use super::state::SessionState;
use super::Command;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("session is finished")]
    Finished,
    #[error("no frames left")]
    NoFramesLeft,
    #[error(transparent)]
    Clock(#[from] ActionError),
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub session_id: String,
    pub policy: FilterPolicy,
    pub dedup_radius: f64,
    /// Run detection on every k-th frame.
    pub detect_every: usize,
    /// Virtual milliseconds between frames.
    pub cadence_ms: u64,
    pub depth_window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: "1".into(),
            policy: FilterPolicy::default(),
            dedup_radius: crate::anchoring::DEFAULT_DEDUP_RADIUS,
            detect_every: 1,
            cadence_ms: 33,
            depth_window: DEFAULT_DEPTH_WINDOW,
        }
    }
}

/// An MLLM query the caller must run and report back through
/// [`Engine::complete`].
#[derive(Debug, Clone)]
pub struct MllmJob {
    pub request: RequestId,
    pub query: MllmRequest,
}

/// Events emitted by one call plus any MLLM work it started.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub events: Vec<SessionEvent>,
    pub jobs: Vec<MllmJob>,
}

/// Wall time of one step, split into the pipeline core and the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub frame: usize,
    pub core_us: u64,
    pub detector_us: u64,
}

/// The single writer of a session. Every mutation is an event applied to
/// [`SessionState`].
pub struct Engine {
    scene: Arc<SceneDirectory>,
    detector: Box<dyn Detector>,
    sink: Box<dyn ShareSink>,
    config: SessionConfig,
    state: SessionState,
    log: Vec<SessionEvent>,
    next_frame: usize,
    timings: Vec<StepTiming>,
    job_images: BTreeMap<JobId, RequestImage>,
}

impl Engine {
    pub fn new(
        scene: Arc<SceneDirectory>,
        detector: Box<dyn Detector>,
        sink: Box<dyn ShareSink>,
        config: SessionConfig,
    ) -> Result<Self, EngineError> {
        if config.detect_every == 0 {
            return Err(EngineError::Config("detect_every must be at least 1".into()));
        }
        if config.cadence_ms == 0 {
            return Err(EngineError::Config("cadence must be positive".into()));
        }
        if !(config.dedup_radius.is_finite() && config.dedup_radius > 0.0) {
            return Err(EngineError::Config("dedup radius must be positive".into()));
        }
        let info = SessionInfo {
            session_id: config.session_id.clone(),
            scene: scene.name.clone(),
            frame_count: scene.frame_count(),
            intrinsics: scene.intrinsics,
            detector: detector.name().to_string(),
            dedup_radius: config.dedup_radius,
            min_confidence: config.policy.min_confidence(),
            denylist: config.policy.denylist().iter().cloned().collect(),
            detect_every: config.detect_every,
            cadence_ms: config.cadence_ms,
        };
        let mut engine = Self {
            scene,
            detector,
            sink,
            config,
            state: SessionState::new(),
            log: Vec::new(),
            next_frame: 0,
            timings: Vec::new(),
            job_images: BTreeMap::new(),
        };
        engine.emit(EventKind::SessionStarted(info));
        Ok(engine)
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    pub fn scene(&self) -> &Arc<SceneDirectory> {
        &self.scene
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn timings(&self) -> &[StepTiming] {
        &self.timings
    }

    pub fn next_frame(&self) -> usize {
        self.next_frame
    }

    pub fn frames_remaining(&self) -> usize {
        self.scene.frame_count().saturating_sub(self.next_frame)
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    pub fn snapshot(&self) -> Snapshot {
        snapshot(&self.state, &self.scene)
    }

    fn emit_at(&mut self, at_ms: u64, kind: EventKind) -> SessionEvent {
        let ev = SessionEvent {
            seq: self.state.last_seq + 1,
            at_ms,
            kind,
        };
        if let Err(reason) = self.state.apply_in_place(&ev) {
            panic!("engine emitted an inconsistent event {}: {reason}", ev.seq);
        }
        self.log.push(ev.clone());
        ev
    }

    fn emit(&mut self, kind: EventKind) -> SessionEvent {
        self.emit_at(self.state.clock_ms, kind)
    }

    fn error(&mut self, reason: impl Into<String>, command: Option<Command>) -> SessionEvent {
        self.emit(EventKind::Error {
            reason: reason.into(),
            command,
        })
    }

    /// Move the virtual clock to `now_ms`, firing expired countdowns.
    pub fn advance_clock(&mut self, now_ms: u64) -> Result<Vec<SessionEvent>, EngineError> {
        if self.state.finished {
            return Err(EngineError::Finished);
        }
        let last = self.state.clock_ms;
        if now_ms < last {
            return Err(ActionError::ClockRegression { now: now_ms, last }.into());
        }
        if now_ms == last {
            return Ok(Vec::new());
        }
        let fired = self.state.widgets.clone().tick(now_ms)?;
        let mut out = vec![self.emit_at(now_ms, EventKind::Ticked)];
        for id in fired {
            let proxy = self.state.widgets.get(id).expect("fired widget exists").proxy;
            out.push(self.emit(EventKind::WidgetFired { id, proxy }));
        }
        Ok(out)
    }

    /// Process the next frame: detect, filter, localize, anchor.
    pub fn step(&mut self) -> Result<Vec<SessionEvent>, EngineError> {
        if self.state.finished {
            return Err(EngineError::Finished);
        }
        let index = self.next_frame;
        if index >= self.scene.frame_count() {
            return Err(EngineError::NoFramesLeft);
        }
        let start = Instant::now();
        let mut events = Vec::new();
        if index > 0 {
            events.extend(self.advance_clock(self.state.clock_ms + self.config.cadence_ms)?);
        }
        let scene = Arc::clone(&self.scene);
        let frame = &scene.frames[index];
        let mut report = FrameReport {
            frame: index,
            ..FrameReport::default()
        };
        let mut detector_time = std::time::Duration::ZERO;
        let mut located = Vec::new();
        if index % self.config.detect_every == 0 {
            let t = Instant::now();
            let detected = self.detector.detect(&frame.color, index);
            detector_time = t.elapsed();
            match detected {
                Ok(out) => {
                    report.detected = true;
                    report.clipped = out.clipped;
                    report.rejected = out.rejected;
                    let (kept, suppressed) = apply_policy(out.detections, &self.config.policy);
                    report.kept = kept.len();
                    report.suppressed = suppressed
                        .into_iter()
                        .map(|s| SuppressedNotice {
                            label: s.detection.label,
                            bbox: s.detection.bbox,
                            reason: s.reason,
                        })
                        .collect();
                    for det in kept {
                        match localize(&det, &frame.depth, &scene.intrinsics, &frame.pose, self.config.depth_window) {
                            Ok(Some(pos)) => located.push((det, pos)),
                            _ => report.no_depth.push(NoDepthNotice {
                                label: det.label,
                                bbox: det.bbox,
                            }),
                        }
                    }
                }
                Err(e) => {
                    events.push(self.error(format!("detector failed on frame {index}: {e}"), None));
                }
            }
        }
        events.push(self.emit(EventKind::FrameProcessed(report)));
        for (det, pos) in located {
            let crop = crate::anchoring::CropRef {
                frame: index,
                bbox: det.bbox,
            };
            let kind = match self.state.registry.plan_upsert(&det.label, &pos, &crop) {
                UpsertPlan::Spawn(id) => EventKind::ProxySpawned {
                    id,
                    label: det.label,
                    world_pos: pos,
                    crop,
                    frame: index,
                },
                UpsertPlan::Update { id, replace_crop } => EventKind::ProxyUpdated {
                    id,
                    frame: index,
                    crop: replace_crop.then_some(crop),
                },
            };
            events.push(self.emit(kind));
        }
        self.next_frame += 1;
        let total = start.elapsed();
        self.timings.push(StepTiming {
            frame: index,
            core_us: total.saturating_sub(detector_time).as_micros() as u64,
            detector_us: detector_time.as_micros() as u64,
        });
        Ok(events)
    }

    pub fn finish(&mut self) -> Vec<SessionEvent> {
        if self.state.finished {
            return Vec::new();
        }
        vec![self.emit(EventKind::SessionFinished)]
    }

    /// Apply a user command. Invalid commands produce a single error event
    /// and leave the state unchanged.
    pub fn handle(&mut self, cmd: Command) -> Outcome {
        let before = self.log.len();
        let jobs = match self.try_handle(&cmd) {
            Ok(jobs) => jobs,
            Err(reason) => {
                self.error(reason, Some(cmd));
                Vec::new()
            }
        };
        Outcome {
            events: self.log[before..].to_vec(),
            jobs,
        }
    }

    fn try_handle(&mut self, cmd: &Command) -> Result<Vec<MllmJob>, String> {
        if self.state.finished {
            return Err("session is finished".to_string());
        }
        match cmd {
            Command::Select { proxy } => {
                let from = self.state.registry.check_select(*proxy).map_err(|e| e.to_string())?;
                let opened = match self.state.registry.get(*proxy).and_then(|p| p.conversation) {
                    Some(_) => None,
                    None => Some(self.state.conversations.next_id()),
                };
                self.emit(EventKind::StateChanged {
                    id: *proxy,
                    from,
                    to: ProxyState::MenuOpen,
                    opened,
                });
                Ok(Vec::new())
            }
            Command::Dismiss { proxy } => {
                let from = self
                    .state
                    .registry
                    .check_transition(*proxy, ProxyState::Bubble)
                    .map_err(|e| e.to_string())?;
                self.emit(EventKind::StateChanged {
                    id: *proxy,
                    from,
                    to: ProxyState::Bubble,
                    opened: None,
                });
                Ok(Vec::new())
            }
            Command::Ask { proxy, question } => {
                let args = ActionArgs::Ask {
                    question: question.clone(),
                };
                args.validate().map_err(|e| e.to_string())?;
                self.dispatch(*proxy, args)
            }
            Command::Dispatch { proxy, action, args } => {
                let args = ActionArgs::parse(*action, args).map_err(|e| e.to_string())?;
                self.dispatch(*proxy, args)
            }
            Command::Compare { proxies, prompt } => {
                if prompt.trim().is_empty() {
                    return Err("prompt must not be empty".to_string());
                }
                let (job, order, image) = self.prepare_compare(proxies)?;
                Ok(vec![self.start_compare(job, order, image, prompt, None)?])
            }
        }
    }

    fn dispatch(&mut self, proxy: ProxyId, args: ActionArgs) -> Result<Vec<MllmJob>, String> {
        let action = args.action();
        let p = self
            .state
            .registry
            .get(proxy)
            .ok_or_else(|| format!("unknown proxy {proxy}"))?
            .clone();
        if p.state != ProxyState::MenuOpen {
            return Err(format!("proxy {proxy} is {}; dispatch needs an open menu", p.state));
        }
        let conversation = p.conversation.expect("menu-open proxies have a conversation");
        let active = ProxyState::ActionActive(action);
        let enter = EventKind::StateChanged {
            id: proxy,
            from: ProxyState::MenuOpen,
            to: active,
            opened: None,
        };
        let leave = EventKind::StateChanged {
            id: proxy,
            from: active,
            to: ProxyState::MenuOpen,
            opened: None,
        };
        match args {
            ActionArgs::Info | ActionArgs::Ask { .. } => {
                let (purpose, prompt) = match &args {
                    ActionArgs::Ask { question } => (Purpose::Ask, ASK.render(&[("question", question)])),
                    _ => (Purpose::Info, INFO_SUMMARY.render(&[])),
                };
                let conv = self.state.conversations.get(conversation).expect("linked conversation");
                if conv.is_pending() {
                    return Err(format!("conversation {conversation} already has a request in flight"));
                }
                let crop = self
                    .scene
                    .crop(p.crop.frame, p.crop.bbox)
                    .ok_or_else(|| format!("crop of {proxy} is unavailable"))?;
                let query = MllmRequest::new(
                    conversation,
                    conv.history(),
                    vec![RequestImage::new(p.label.clone(), crop.image)],
                    prompt,
                    &self.config.policy,
                )
                .map_err(|e| e.to_string())?;
                self.emit(enter);
                let images = vec![ImageRef::Crop { proxy, crop: p.crop }];
                Ok(vec![self.request(query, Some(proxy), purpose, images)])
            }
            ActionArgs::Compare { with, prompt } => {
                let mut ids = vec![proxy];
                ids.extend(with);
                let (job, order, image) = self.prepare_compare(&ids)?;
                self.emit(enter);
                Ok(vec![self.start_compare(job, order, image, &prompt, Some(proxy))?])
            }
            ActionArgs::SendToContact { recipient, message } => {
                let payload = SharePayload {
                    recipient,
                    message,
                    proxy: ProxySnapshot::from(&p),
                    at_ms: self.state.clock_ms,
                };
                self.emit(enter);
                match self.sink.deliver(&payload) {
                    Ok(()) => self.emit(EventKind::Shared(ShareRecord::Contact(payload))),
                    Err(e) => self.error(format!("share failed: {e}"), None),
                };
                self.emit(leave);
                Ok(Vec::new())
            }
            ActionArgs::AddToShoppingList => {
                let entry = ShoppingEntry {
                    proxy,
                    label: p.label.clone(),
                    refined_label: p.refined_label.clone(),
                    crop: p.crop,
                    added_at_ms: self.state.clock_ms,
                };
                self.emit(enter);
                match self.sink.add_to_shopping_list(&entry) {
                    Ok(()) => self.emit(EventKind::Shared(ShareRecord::ShoppingList(entry))),
                    Err(e) => self.error(format!("shopping list write failed: {e}"), None),
                };
                self.emit(leave);
                Ok(Vec::new())
            }
            ActionArgs::Note { .. } | ActionArgs::Timer | ActionArgs::Countdown(_) => {
                let args = match args {
                    ActionArgs::Countdown(CountdownSource::AnswerOf(src)) => {
                        ActionArgs::Countdown(CountdownSource::Seconds(self.duration_from_answer(src)?))
                    }
                    other => other,
                };
                let widget = self
                    .state
                    .widgets
                    .build(proxy, &args, self.state.clock_ms)
                    .expect("anchor actions build widgets");
                self.emit(enter);
                self.emit(EventKind::WidgetCreated(widget));
                self.emit(leave);
                Ok(Vec::new())
            }
        }
    }

    fn duration_from_answer(&self, src: ProxyId) -> Result<u64, String> {
        let answer = self
            .state
            .registry
            .get(src)
            .ok_or_else(|| format!("unknown proxy {src}"))?
            .conversation
            .and_then(|c| self.state.conversations.get(c))
            .and_then(|c| c.last_answer())
            .ok_or_else(|| format!("proxy {src} has no answer to take a duration from"))?;
        let secs = parse_duration_secs(answer).ok_or_else(|| format!("no duration in the answer of {src}"))?;
        countdown_seconds(secs).map_err(|e| e.to_string())?;
        Ok(secs)
    }

    fn prepare_compare(&self, ids: &[ProxyId]) -> Result<(JobId, Vec<ProxyId>, RequestImage), String> {
        if self.state.active_job.is_some() {
            return Err("a comparison is already running".to_string());
        }
        if ids.len() < 2 {
            return Err(format!("need at least 2 proxies to compare (got {})", ids.len()));
        }
        let mut seen = std::collections::BTreeSet::new();
        let frame = self.state.frame.unwrap_or(0);
        let pose = &self.scene.frames[frame].pose;
        let mut items = Vec::new();
        for id in ids {
            if !seen.insert(*id) {
                return Err(format!("proxy {id} listed twice"));
            }
            let p = self.state.registry.get(*id).ok_or_else(|| format!("unknown proxy {id}"))?;
            let crop = self
                .scene
                .crop(p.crop.frame, p.crop.bbox)
                .ok_or_else(|| format!("crop of {id} is unavailable"))?;
            items.push(CompareItem {
                proxy: *id,
                label: p.label.clone(),
                crop: crop.image,
                projection: project(p.world_pos, pose, &self.scene.intrinsics),
            });
        }
        let (order, image) = prepare(&items).map_err(|e| e.to_string())?;
        Ok((self.state.next_job(), order, image))
    }

    fn start_compare(
        &mut self,
        job: JobId,
        proxies: Vec<ProxyId>,
        image: RequestImage,
        prompt: &str,
        origin: Option<ProxyId>,
    ) -> Result<MllmJob, String> {
        let conversation = self.state.conversations.next_id();
        let query = MllmRequest::new(conversation, Vec::new(), vec![image.clone()], prompt, &self.config.policy)
            .map_err(|e| e.to_string())?;
        let stitched = stitched_info(&image);
        self.emit(EventKind::ComparerStarted {
            job,
            conversation,
            proxies: proxies.clone(),
            prompt: prompt.to_string(),
            stitched: stitched.clone(),
            origin,
        });
        self.job_images.insert(job, image);
        let images = vec![ImageRef::Stitched {
            proxies,
            width: stitched.width,
            height: stitched.height,
            sha256: stitched.sha256,
        }];
        Ok(self.request(query, None, Purpose::Compare, images))
    }

    fn request(
        &mut self,
        query: MllmRequest,
        proxy: Option<ProxyId>,
        purpose: Purpose,
        images: Vec<ImageRef>,
    ) -> MllmJob {
        let request = self.state.next_request();
        self.emit(EventKind::MllmRequested {
            request,
            conversation: query.conversation(),
            proxy,
            purpose,
            prompt: query.prompt().to_string(),
            labels: query.labels(),
            images,
            fingerprint: query.fingerprint(),
        });
        MllmJob { request, query }
    }

    /// Deliver the outcome of an MLLM job.
    pub fn complete(&mut self, request: RequestId, result: Result<String, String>) -> Outcome {
        let before = self.log.len();
        let jobs = self.try_complete(request, result);
        Outcome {
            events: self.log[before..].to_vec(),
            jobs,
        }
    }

    fn try_complete(&mut self, request: RequestId, result: Result<String, String>) -> Vec<MllmJob> {
        if self.state.finished {
            return Vec::new();
        }
        let Some(pending) = self.state.pending.get(&request).cloned() else {
            self.error(format!("reply for unknown request {request}"), None);
            return Vec::new();
        };
        let ok = result.is_ok();
        let text = match &result {
            Ok(t) | Err(t) => t.clone(),
        };
        let refined_label = match (pending.purpose, ok) {
            (Purpose::Info, true) => refined_label_from_summary(&text),
            _ => None,
        };
        self.emit(EventKind::MllmReplied {
            request,
            conversation: pending.conversation,
            ok,
            text: text.clone(),
            refined_label,
        });
        if !ok {
            self.error(format!("mllm request {request} failed: {text}"), None);
        }
        match pending.purpose {
            Purpose::Info | Purpose::Ask => {
                let proxy = pending.proxy.expect("info/ask requests name a proxy");
                self.leave_action(proxy);
                Vec::new()
            }
            Purpose::Compare => {
                let job = self.state.active_job.clone().expect("comparer reply with a running job");
                if ok && is_which_question(&job.prompt) {
                    let conv = self.state.conversations.get(job.conversation).expect("job conversation");
                    let image = self.job_images[&job.id].clone();
                    let query = MllmRequest::new(
                        job.conversation,
                        conv.history(),
                        vec![image],
                        indexing_reprompt(&job.prompt),
                        &self.config.policy,
                    )
                    .expect("labels already passed the privacy check");
                    let images = vec![ImageRef::Stitched {
                        proxies: job.proxies.clone(),
                        width: job.stitched.width,
                        height: job.stitched.height,
                        sha256: job.stitched.sha256.clone(),
                    }];
                    return vec![self.request(query, None, Purpose::CompareIndices, images)];
                }
                let answer = if ok {
                    ComparerAnswer::Text(text)
                } else {
                    ComparerAnswer::Failed(text)
                };
                self.complete_job(job.id, answer, None, None, None, job.origin);
                Vec::new()
            }
            Purpose::CompareIndices => {
                let job = self.state.active_job.clone().expect("comparer reply with a running job");
                let first = self
                    .state
                    .conversations
                    .get(job.conversation)
                    .and_then(|c| c.turns.get(1))
                    .map(|t| t.text.clone())
                    .unwrap_or_default();
                let parsed = if ok {
                    extract_indices(&text, job.proxies.len()).map_err(|e| e.to_string())
                } else {
                    Err(text)
                };
                match parsed {
                    Ok(indices) => {
                        let marked = indices.iter().map(|i| job.proxies[*i]).collect();
                        self.complete_job(job.id, ComparerAnswer::Text(first), Some(indices), Some(marked), None, job.origin);
                    }
                    Err(e) => {
                        self.complete_job(job.id, ComparerAnswer::Text(first), None, None, Some(e), job.origin);
                    }
                }
                Vec::new()
            }
        }
    }

    fn complete_job(
        &mut self,
        job: JobId,
        answer: ComparerAnswer,
        indices: Option<Vec<usize>>,
        marked: Option<Vec<ProxyId>>,
        index_error: Option<String>,
        origin: Option<ProxyId>,
    ) {
        self.emit(EventKind::ComparerCompleted {
            job,
            answer,
            indices,
            marked,
            index_error,
        });
        self.job_images.remove(&job);
        if let Some(p) = origin {
            self.leave_action(p);
        }
    }

    fn leave_action(&mut self, proxy: ProxyId) {
        if let Some(ProxyState::ActionActive(a)) = self.state.registry.get(proxy).map(|p| p.state) {
            self.emit(EventKind::StateChanged {
                id: proxy,
                from: ProxyState::ActionActive(a),
                to: ProxyState::MenuOpen,
                opened: None,
            });
        }
    }

    /// Run jobs to completion on the calling thread, including any
    /// follow-up jobs they start. Order is first-in, first-out.
    pub fn run_jobs(&mut self, jobs: Vec<MllmJob>, client: &dyn MllmClient) -> Vec<SessionEvent> {
        let mut queue: std::collections::VecDeque<MllmJob> = jobs.into();
        let mut events = Vec::new();
        while let Some(job) = queue.pop_front() {
            let result = client.query(&job.query).map(|r| r.text).map_err(|e| e.to_string());
            let out = self.complete(job.request, result);
            events.extend(out.events);
            queue.extend(out.jobs);
        }
        events
    }
}
