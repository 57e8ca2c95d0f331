use serde::{Deserialize, Serialize};

use crate::actions::{ShoppingEntry, Widget};
use crate::anchoring::{CropRef, ProxyState};
use crate::conversation::{truncate_words, DISPLAY_WORD_LIMIT};
use crate::geometry::{project, WorldPoint};
use crate::ids::{ConversationId, ProxyId};
use crate::scene::SceneDirectory;

use super::state::{ActiveJob, CompletedJob, SessionState};

/// Read-only view of a session for the viewer. A pure function of the
/// folded state and the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub clock_ms: u64,
    pub frame: Option<usize>,
    pub frame_count: usize,
    pub finished: bool,
    pub proxies: Vec<ProxyView>,
    pub widgets: Vec<WidgetView>,
    pub comparer: Option<ActiveJob>,
    pub last_comparison: Option<CompletedJob>,
    pub shopping: Vec<ShoppingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyView {
    pub id: ProxyId,
    pub label: String,
    pub refined_label: Option<String>,
    pub state: ProxyState,
    pub marked: bool,
    pub world_pos: WorldPoint,
    /// Source of the image served at `/crops/<id>.png`.
    pub crop: CropRef,
    /// Pixel position in the current frame; `None` behind the camera.
    pub screen: Option<[f64; 2]>,
    pub conversation: Option<ConversationId>,
    pub pending: bool,
    /// Latest answer, cut for display.
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidgetView {
    #[serde(flatten)]
    pub widget: Widget,
    /// `m:ss` for timers and countdowns.
    pub clock: Option<String>,
}

pub fn snapshot(state: &SessionState, scene: &SceneDirectory) -> Snapshot {
    let pose = state.frame.and_then(|f| scene.frame(f)).map(|f| &f.pose);
    let proxies = state
        .registry
        .iter()
        .map(|p| {
            let conv = p.conversation.and_then(|c| state.conversations.get(c));
            ProxyView {
                id: p.id,
                label: p.label.clone(),
                refined_label: p.refined_label.clone(),
                state: p.state,
                marked: p.marked,
                world_pos: p.world_pos,
                crop: p.crop,
                screen: pose
                    .and_then(|pose| project(p.world_pos, pose, &scene.intrinsics).pixel())
                    .map(|px| [px.u, px.v]),
                conversation: p.conversation,
                pending: conv.is_some_and(|c| c.is_pending()),
                answer: conv
                    .and_then(|c| c.last_answer())
                    .map(|a| truncate_words(a, DISPLAY_WORD_LIMIT)),
            }
        })
        .collect();
    Snapshot {
        seq: state.last_seq,
        clock_ms: state.clock_ms,
        frame: state.frame,
        frame_count: scene.frame_count(),
        finished: state.finished,
        proxies,
        widgets: state
            .widgets
            .iter()
            .map(|w| WidgetView {
                widget: w.clone(),
                clock: w.clock_label(),
            })
            .collect(),
        comparer: state.active_job.clone(),
        last_comparison: state.jobs.last().cloned(),
        shopping: state.shopping.clone(),
    }
}
