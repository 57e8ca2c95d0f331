//! World-anchored object proxies: localization of detections, the proxy
//! registry with same-label duplicate suppression, and the per-proxy
//! bubble/menu/action state machine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::actions::ActionId;
use crate::detection::Detection;
use crate::geometry::{
    raycast_to_world, CameraIntrinsics, DepthFrame, GeometryError, Pose, WorldPoint,
};
use crate::ids::{ConversationId, ProxyId};
use crate::scene::PixelRect;

pub const DEFAULT_DEDUP_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnchorError {
    #[error("unknown proxy {0}")]
    NotFound(ProxyId),
    #[error("proxy {id}: illegal transition {from} -> {to}")]
    IllegalTransition {
        id: ProxyId,
        from: ProxyState,
        to: ProxyState,
    },
    #[error("proxy {0} already exists")]
    Duplicate(ProxyId),
    #[error("world position is not finite")]
    NonFinite,
    #[error("proxy {id}: frame {frame} precedes first sighting {first_seen}")]
    FrameRegression {
        id: ProxyId,
        frame: usize,
        first_seen: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyState {
    Bubble,
    MenuOpen,
    ActionActive(ActionId),
}

impl std::fmt::Display for ProxyState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProxyState::Bubble => f.write_str("bubble"),
            ProxyState::MenuOpen => f.write_str("menu_open"),
            ProxyState::ActionActive(a) => write!(f, "action_active({a})"),
        }
    }
}

impl ProxyState {
    pub fn can_transition(self, to: ProxyState) -> bool {
        use ProxyState::*;
        matches!(
            (self, to),
            (Bubble, MenuOpen) | (MenuOpen, Bubble) | (MenuOpen, ActionActive(_)) | (ActionActive(_), MenuOpen)
        )
    }
}

/// Where a proxy's best crop lives: a frame and a rect inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRef {
    pub frame: usize,
    pub bbox: PixelRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProxy {
    pub id: ProxyId,
    pub label: String,
    pub refined_label: Option<String>,
    pub world_pos: WorldPoint,
    pub crop: CropRef,
    pub state: ProxyState,
    pub conversation: Option<ConversationId>,
    pub first_seen: usize,
    pub last_seen: usize,
    pub marked: bool,
}

/// Outcome of matching a new sighting against the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertPlan {
    Spawn(ProxyId),
    Update { id: ProxyId, replace_crop: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRegistry {
    proxies: BTreeMap<ProxyId, ObjectProxy>,
    dedup_radius: f64,
    next_id: ProxyId,
}

impl Default for ProxyRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_DEDUP_RADIUS)
    }
}

impl ProxyRegistry {
    pub fn new(dedup_radius: f64) -> Self {
        Self {
            proxies: BTreeMap::new(),
            dedup_radius,
            next_id: ProxyId(1),
        }
    }

    pub fn dedup_radius(&self) -> f64 {
        self.dedup_radius
    }

    pub fn len(&self) -> usize {
        self.proxies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proxies.is_empty()
    }

    pub fn get(&self, id: ProxyId) -> Option<&ObjectProxy> {
        self.proxies.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ObjectProxy> {
        self.proxies.values()
    }

    pub fn contains(&self, id: ProxyId) -> bool {
        self.proxies.contains_key(&id)
    }

    fn proxy_mut(&mut self, id: ProxyId) -> Result<&mut ObjectProxy, AnchorError> {
        self.proxies.get_mut(&id).ok_or(AnchorError::NotFound(id))
    }

    /// Nearest proxy with the same coarse label strictly inside the radius.
    pub fn find_match(&self, label: &str, pos: &WorldPoint) -> Option<ProxyId> {
        self.proxies
            .values()
            .filter(|p| p.label == label)
            .map(|p| (p.world_pos.distance(pos), p.id))
            .filter(|(d, _)| *d < self.dedup_radius)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    pub fn plan_upsert(&self, label: &str, pos: &WorldPoint, crop: &CropRef) -> UpsertPlan {
        match self.find_match(label, pos) {
            Some(id) => UpsertPlan::Update {
                id,
                replace_crop: crop.bbox.area() > self.proxies[&id].crop.bbox.area(),
            },
            None => UpsertPlan::Spawn(self.next_id),
        }
    }

    /// Insert a new proxy in the bubble state. `id` must be fresh.
    pub fn spawn(
        &mut self,
        id: ProxyId,
        label: &str,
        world_pos: WorldPoint,
        crop: CropRef,
        frame: usize,
    ) -> Result<(), AnchorError> {
        if !world_pos.is_finite() {
            return Err(AnchorError::NonFinite);
        }
        if self.proxies.contains_key(&id) || id < self.next_id {
            return Err(AnchorError::Duplicate(id));
        }
        self.proxies.insert(
            id,
            ObjectProxy {
                id,
                label: label.to_string(),
                refined_label: None,
                world_pos,
                crop,
                state: ProxyState::Bubble,
                conversation: None,
                first_seen: frame,
                last_seen: frame,
                marked: false,
            },
        );
        self.next_id = id.next();
        Ok(())
    }

    /// Record a re-sighting. The anchor position never moves.
    pub fn touch(&mut self, id: ProxyId, frame: usize, crop: Option<CropRef>) -> Result<(), AnchorError> {
        let p = self.proxy_mut(id)?;
        if frame < p.first_seen {
            return Err(AnchorError::FrameRegression {
                id,
                frame,
                first_seen: p.first_seen,
            });
        }
        p.last_seen = p.last_seen.max(frame);
        if let Some(c) = crop {
            p.crop = c;
        }
        Ok(())
    }

    /// Spawn or update; returns the proxy id and whether it was newly spawned.
    pub fn upsert(
        &mut self,
        label: &str,
        world_pos: WorldPoint,
        crop: CropRef,
        frame: usize,
    ) -> Result<(ProxyId, bool), AnchorError> {
        match self.plan_upsert(label, &world_pos, &crop) {
            UpsertPlan::Spawn(id) => {
                self.spawn(id, label, world_pos, crop, frame)?;
                Ok((id, true))
            }
            UpsertPlan::Update { id, replace_crop } => {
                self.touch(id, frame, replace_crop.then_some(crop))?;
                Ok((id, false))
            }
        }
    }

    pub fn remove(&mut self, id: ProxyId) -> Result<ObjectProxy, AnchorError> {
        self.proxies.remove(&id).ok_or(AnchorError::NotFound(id))
    }

    /// Bubble-state proxies not seen for more than `frames` frames.
    pub fn stale(&self, current_frame: usize, frames: usize) -> Vec<ProxyId> {
        self.proxies
            .values()
            .filter(|p| p.state == ProxyState::Bubble && current_frame.saturating_sub(p.last_seen) > frames)
            .map(|p| p.id)
            .collect()
    }

    /// Check a transition without applying it; returns the current state.
    pub fn check_transition(&self, id: ProxyId, to: ProxyState) -> Result<ProxyState, AnchorError> {
        let from = self.proxies.get(&id).ok_or(AnchorError::NotFound(id))?.state;
        if from.can_transition(to) {
            Ok(from)
        } else {
            Err(AnchorError::IllegalTransition { id, from, to })
        }
    }

    /// Apply a legal transition; returns the new state.
    pub fn transition(&mut self, id: ProxyId, to: ProxyState) -> Result<ProxyState, AnchorError> {
        self.check_transition(id, to)?;
        self.proxy_mut(id)?.state = to;
        Ok(to)
    }

    /// Open the menu of a bubble. Returning to the menu from an action goes
    /// through [`ProxyRegistry::end_action`] instead.
    pub fn select(&mut self, id: ProxyId) -> Result<ProxyState, AnchorError> {
        self.check_select(id)?;
        self.transition(id, ProxyState::MenuOpen)
    }

    pub fn check_select(&self, id: ProxyId) -> Result<ProxyState, AnchorError> {
        let from = self.proxies.get(&id).ok_or(AnchorError::NotFound(id))?.state;
        if from == ProxyState::Bubble {
            Ok(from)
        } else {
            Err(AnchorError::IllegalTransition {
                id,
                from,
                to: ProxyState::MenuOpen,
            })
        }
    }

    pub fn dismiss(&mut self, id: ProxyId) -> Result<ProxyState, AnchorError> {
        self.transition(id, ProxyState::Bubble)
    }

    pub fn begin_action(&mut self, id: ProxyId, action: ActionId) -> Result<ProxyState, AnchorError> {
        self.transition(id, ProxyState::ActionActive(action))
    }

    pub fn end_action(&mut self, id: ProxyId) -> Result<ProxyState, AnchorError> {
        match self.proxies.get(&id).map(|p| p.state) {
            Some(ProxyState::ActionActive(_)) => self.transition(id, ProxyState::MenuOpen),
            Some(from) => Err(AnchorError::IllegalTransition {
                id,
                from,
                to: ProxyState::MenuOpen,
            }),
            None => Err(AnchorError::NotFound(id)),
        }
    }

    /// Exactly `ids` end up marked. Unknown ids fail without mutating.
    pub fn mark(&mut self, ids: &[ProxyId]) -> Result<(), AnchorError> {
        if let Some(missing) = ids.iter().find(|id| !self.proxies.contains_key(id)) {
            return Err(AnchorError::NotFound(*missing));
        }
        let set: BTreeSet<ProxyId> = ids.iter().copied().collect();
        for p in self.proxies.values_mut() {
            p.marked = set.contains(&p.id);
        }
        Ok(())
    }

    pub fn marked(&self) -> Vec<ProxyId> {
        self.proxies.values().filter(|p| p.marked).map(|p| p.id).collect()
    }

    pub fn set_conversation(&mut self, id: ProxyId, conv: ConversationId) -> Result<(), AnchorError> {
        self.proxy_mut(id)?.conversation = Some(conv);
        Ok(())
    }

    pub fn set_refined_label(&mut self, id: ProxyId, label: String) -> Result<(), AnchorError> {
        self.proxy_mut(id)?.refined_label = Some(label);
        Ok(())
    }
}

/// World position of a detection: raycast through the center of its box.
pub fn localize(
    det: &Detection,
    df: &DepthFrame,
    k: &CameraIntrinsics,
    pose: &Pose,
    window: usize,
) -> Result<Option<WorldPoint>, GeometryError> {
    raycast_to_world(det.bbox.center(), df, k, pose, window)
}
