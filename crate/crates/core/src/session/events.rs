use serde::{Deserialize, Serialize};

use crate::actions::{ShoppingEntry, SharePayload, Widget};
use crate::anchoring::{CropRef, ProxyState};
use crate::comparer::{ComparerAnswer, StitchedInfo};
use crate::conversation::ImageRef;
use crate::detection::{ClipNotice, SuppressionReason};
use crate::geometry::{CameraIntrinsics, WorldPoint};
use crate::ids::{ConversationId, JobId, ProxyId, RequestId, WidgetId};
use crate::scene::PixelRect;

use super::Command;

/// One entry of the append-only session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    /// Virtual session time.
    pub at_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted(SessionInfo),
    /// The virtual clock moved forward to `at_ms`.
    Ticked,
    FrameProcessed(FrameReport),
    ProxySpawned {
        id: ProxyId,
        label: String,
        world_pos: WorldPoint,
        crop: CropRef,
        frame: usize,
    },
    ProxyUpdated {
        id: ProxyId,
        frame: usize,
        /// Present when the new sighting had a larger box.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        crop: Option<CropRef>,
    },
    StateChanged {
        id: ProxyId,
        from: ProxyState,
        to: ProxyState,
        /// Conversation created for the proxy by this transition.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        opened: Option<ConversationId>,
    },
    MllmRequested {
        request: RequestId,
        conversation: ConversationId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        proxy: Option<ProxyId>,
        purpose: Purpose,
        prompt: String,
        labels: Vec<String>,
        images: Vec<ImageRef>,
        fingerprint: String,
    },
    MllmReplied {
        request: RequestId,
        conversation: ConversationId,
        ok: bool,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        refined_label: Option<String>,
    },
    ComparerStarted {
        job: JobId,
        conversation: ConversationId,
        /// Left to right; index 0 is the leftmost on screen.
        proxies: Vec<ProxyId>,
        prompt: String,
        stitched: StitchedInfo,
        /// Proxy whose menu dispatched the comparison, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        origin: Option<ProxyId>,
    },
    ComparerCompleted {
        job: JobId,
        answer: ComparerAnswer,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        indices: Option<Vec<usize>>,
        /// The full marked set after the job; `None` leaves marks alone.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        marked: Option<Vec<ProxyId>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        index_error: Option<String>,
    },
    WidgetCreated(Widget),
    WidgetFired {
        id: WidgetId,
        proxy: ProxyId,
    },
    Shared(ShareRecord),
    Error {
        reason: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<Command>,
    },
    SessionFinished,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::SessionStarted(_) => "session_started",
            EventKind::Ticked => "ticked",
            EventKind::FrameProcessed(_) => "frame_processed",
            EventKind::ProxySpawned { .. } => "proxy_spawned",
            EventKind::ProxyUpdated { .. } => "proxy_updated",
            EventKind::StateChanged { .. } => "state_changed",
            EventKind::MllmRequested { .. } => "mllm_requested",
            EventKind::MllmReplied { .. } => "mllm_replied",
            EventKind::ComparerStarted { .. } => "comparer_started",
            EventKind::ComparerCompleted { .. } => "comparer_completed",
            EventKind::WidgetCreated(_) => "widget_created",
            EventKind::WidgetFired { .. } => "widget_fired",
            EventKind::Shared(_) => "shared",
            EventKind::Error { .. } => "error",
            EventKind::SessionFinished => "session_finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub scene: String,
    pub frame_count: usize,
    pub intrinsics: CameraIntrinsics,
    pub detector: String,
    pub dedup_radius: f64,
    pub min_confidence: f64,
    pub denylist: Vec<String>,
    pub detect_every: usize,
    pub cadence_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Info,
    Ask,
    Compare,
    CompareIndices,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    /// False when detection was skipped (cadence) or failed.
    pub detected: bool,
    pub kept: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<SuppressedNotice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clipped: Vec<ClipNotice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub no_depth: Vec<NoDepthNotice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressedNotice {
    pub label: String,
    pub bbox: PixelRect,
    pub reason: SuppressionReason,
}

/// A kept detection that could not be localized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoDepthNotice {
    pub label: String,
    pub bbox: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case")]
pub enum ShareRecord {
    Contact(SharePayload),
    ShoppingList(ShoppingEntry),
}
