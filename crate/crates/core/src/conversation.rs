//! One MLLM conversation per object proxy.
//!
//! A conversation keeps the ordered user/assistant turns and the image
//! context it was opened with. Failed queries leave an assistant turn
//! flagged `failed`; such exchanges are kept in the history but not sent
//! back to the model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anchoring::{CropRef, ObjectProxy};
use crate::detection::FilterPolicy;
use crate::ids::{ConversationId, ProxyId};
use crate::mllm::{HistoryTurn, MllmClient, MllmError, MllmRequest, PrivacyViolation, RequestImage, Role};
use crate::scene::CropImage;

/// Prompt sent by the "info" action, verbatim.
pub const INFO_SUMMARY_PROMPT: &str = "Provide the information from the following list that makes sense for this object. Fill in the missing \"…\" using info from the Internet. Exclude the one that are irrelevant. Divide the relevant ones with a \"*\". * Price: … (give price+vendor+score/ rating) * Cheaper alternatives: name - price * Main ingredients: … (top 2) * Calories: … * Allergens: … * Instructions: … (short) * Care: …(if fashion/tool/plant). Use extremely short answers and exclude answers that are 'None' or 'n/a' or 'irrelevant'. Limit to 30 words.";

/// Replies longer than this are cut for display.
pub const DISPLAY_WORD_LIMIT: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub text: &'static str,
}

impl PromptTemplate {
    /// Substitute `{key}` placeholders.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        vars.iter()
            .fold(self.text.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
    }
}

pub const INFO_SUMMARY: PromptTemplate = PromptTemplate {
    name: "info_summary",
    text: INFO_SUMMARY_PROMPT,
};

pub const ASK: PromptTemplate = PromptTemplate {
    name: "ask",
    text: "{question}",
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConversationError {
    #[error("unknown conversation {0}")]
    NotFound(ConversationId),
    #[error("conversation {0} already has a request in flight")]
    InFlight(ConversationId),
    #[error("conversation {0}: turns must alternate user/assistant")]
    Alternation(ConversationId),
    #[error("conversation id {got} out of sequence (expected {expected})")]
    Sequence {
        expected: ConversationId,
        got: ConversationId,
    },
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error(transparent)]
    Privacy(#[from] PrivacyViolation),
    #[error("action failed: {0}")]
    ActionFailed(MllmError),
}

/// What an image attached to a turn was.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ImageRef {
    Crop { proxy: ProxyId, crop: CropRef },
    Stitched { proxies: Vec<ProxyId>, width: u32, height: u32, sha256: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationState {
    pub id: ConversationId,
    /// `None` for comparer conversations.
    pub proxy: Option<ProxyId>,
    /// Image attached when the conversation was opened.
    pub context: Option<ImageRef>,
    pub turns: Vec<Turn>,
}

impl ConversationState {
    pub fn is_pending(&self) -> bool {
        self.turns.last().is_some_and(|t| t.role == Role::User)
    }

    /// History to send with the next request: completed, successful
    /// exchanges only.
    pub fn history(&self) -> Vec<HistoryTurn> {
        let mut out = Vec::new();
        for pair in self.turns.chunks(2) {
            if let [user, reply] = pair {
                if !reply.failed {
                    out.push(HistoryTurn {
                        role: user.role,
                        text: user.text.clone(),
                    });
                    out.push(HistoryTurn {
                        role: reply.role,
                        text: reply.text.clone(),
                    });
                }
            }
        }
        out
    }

    /// Latest successful assistant reply.
    pub fn last_answer(&self) -> Option<&str> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::Assistant && !t.failed)
            .map(|t| t.text.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationStore {
    conversations: BTreeMap<ConversationId, ConversationState>,
    by_proxy: BTreeMap<ProxyId, ConversationId>,
    last_id: u32,
}

impl ConversationStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> ConversationId {
        ConversationId(self.last_id + 1)
    }

    pub fn get(&self, id: ConversationId) -> Option<&ConversationState> {
        self.conversations.get(&id)
    }

    pub fn for_proxy(&self, proxy: ProxyId) -> Option<&ConversationState> {
        self.by_proxy.get(&proxy).and_then(|id| self.conversations.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConversationState> {
        self.conversations.values()
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    /// Open conversation `id`, which must be the next id in sequence.
    pub fn open(
        &mut self,
        id: ConversationId,
        proxy: Option<ProxyId>,
        context: Option<ImageRef>,
    ) -> Result<(), ConversationError> {
        if id != self.next_id() {
            return Err(ConversationError::Sequence {
                expected: self.next_id(),
                got: id,
            });
        }
        if let Some(p) = proxy {
            if self.by_proxy.contains_key(&p) {
                return Err(ConversationError::Sequence {
                    expected: self.by_proxy[&p],
                    got: id,
                });
            }
            self.by_proxy.insert(p, id);
        }
        self.conversations.insert(
            id,
            ConversationState {
                id,
                proxy,
                context,
                turns: Vec::new(),
            },
        );
        self.last_id = id.0;
        Ok(())
    }

    /// Idempotent: the proxy's conversation, opened with its crop if new.
    /// The flag reports whether it was created by this call.
    pub fn ensure_session(&mut self, proxy: &ObjectProxy) -> (ConversationId, bool) {
        if let Some(id) = self.by_proxy.get(&proxy.id) {
            return (*id, false);
        }
        let id = self.next_id();
        self.open(
            id,
            Some(proxy.id),
            Some(ImageRef::Crop {
                proxy: proxy.id,
                crop: proxy.crop,
            }),
        )
        .expect("next id is in sequence");
        (id, true)
    }

    pub fn push_user(
        &mut self,
        id: ConversationId,
        text: String,
        images: Vec<ImageRef>,
    ) -> Result<(), ConversationError> {
        let conv = self.conversations.get_mut(&id).ok_or(ConversationError::NotFound(id))?;
        if conv.is_pending() {
            return Err(ConversationError::InFlight(id));
        }
        conv.turns.push(Turn {
            role: Role::User,
            text,
            images,
            failed: false,
        });
        Ok(())
    }

    pub fn push_assistant(
        &mut self,
        id: ConversationId,
        text: String,
        failed: bool,
    ) -> Result<(), ConversationError> {
        let conv = self.conversations.get_mut(&id).ok_or(ConversationError::NotFound(id))?;
        if !conv.is_pending() {
            return Err(ConversationError::Alternation(id));
        }
        conv.turns.push(Turn {
            role: Role::Assistant,
            text,
            images: Vec::new(),
            failed,
        });
        Ok(())
    }
}

/// Build the request for a proxy's next question: full prior history,
/// the crop attached again.
pub fn build_request(
    conv: &ConversationState,
    label: &str,
    crop: &CropImage,
    prompt: &str,
    policy: &FilterPolicy,
) -> Result<MllmRequest, PrivacyViolation> {
    MllmRequest::new(
        conv.id,
        conv.history(),
        vec![RequestImage::new(label, crop.image.clone())],
        prompt,
        policy,
    )
}

fn exchange(
    store: &mut ConversationStore,
    client: &dyn MllmClient,
    policy: &FilterPolicy,
    proxy: &ObjectProxy,
    crop: &CropImage,
    prompt: String,
) -> Result<String, ConversationError> {
    let (id, _) = store.ensure_session(proxy);
    let conv = store.get(id).expect("just ensured");
    if conv.is_pending() {
        return Err(ConversationError::InFlight(id));
    }
    let req = build_request(conv, &proxy.label, crop, &prompt, policy)?;
    store.push_user(
        id,
        prompt,
        vec![ImageRef::Crop {
            proxy: proxy.id,
            crop: proxy.crop,
        }],
    )?;
    match client.query(&req) {
        Ok(reply) => {
            store.push_assistant(id, reply.text.clone(), false)?;
            Ok(reply.text)
        }
        Err(e) => {
            store.push_assistant(id, e.to_string(), true)?;
            Err(ConversationError::ActionFailed(e))
        }
    }
}

/// Ask the proxy's model for the info summary.
pub fn summarize(
    store: &mut ConversationStore,
    client: &dyn MllmClient,
    policy: &FilterPolicy,
    proxy: &ObjectProxy,
    crop: &CropImage,
) -> Result<String, ConversationError> {
    exchange(store, client, policy, proxy, crop, INFO_SUMMARY.render(&[]))
}

pub fn ask(
    store: &mut ConversationStore,
    client: &dyn MllmClient,
    policy: &FilterPolicy,
    proxy: &ObjectProxy,
    crop: &CropImage,
    question: &str,
) -> Result<String, ConversationError> {
    if question.trim().is_empty() {
        return Err(ConversationError::EmptyQuestion);
    }
    exchange(store, client, policy, proxy, crop, ASK.render(&[("question", question)]))
}

/// Cut to `limit` whitespace-separated words, marking the cut with "…".
pub fn truncate_words(text: &str, limit: usize) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= limit {
        return text.to_string();
    }
    format!("{} …", words[..limit].join(" "))
}

/// The product name a summary leads with, e.g. "Superior Dark Soy Sauce"
/// from "Superior Dark Soy Sauce * Price: ...".
pub fn refined_label_from_summary(summary: &str) -> Option<String> {
    let head = summary
        .split(['*', '\n'])
        .next()?
        .trim()
        .trim_end_matches(['.', ',', ';', ':', '-'])
        .trim();
    let words = head.split_whitespace().count();
    if head.is_empty() || head.contains(':') || words > 6 || head.chars().count() > 60 {
        return None;
    }
    Some(head.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchoring::ProxyState;
    use crate::geometry::WorldPoint;
    use crate::mllm::{CaptureClient, MockClient};
    use crate::scene::{ColorFrame, PixelRect};

    fn proxy(id: u32) -> ObjectProxy {
        ObjectProxy {
            id: ProxyId(id),
            label: "bottle".into(),
            refined_label: None,
            world_pos: WorldPoint::new(0.0, 0.0, 1.0),
            crop: CropRef {
                frame: 0,
                bbox: PixelRect::new(0, 0, 2, 2),
            },
            state: ProxyState::MenuOpen,
            conversation: None,
            first_seen: 0,
            last_seen: 0,
            marked: false,
        }
    }

    fn crop(v: u8) -> CropImage {
        CropImage {
            source_frame: 0,
            bbox: PixelRect::new(0, 0, 2, 2),
            image: ColorFrame::filled(2, 2, [v; 3]),
        }
    }

    #[test]
    fn prompt_matches_fixture() {
        let pinned = include_str!("../../../fixtures/prompts/info_summary.txt");
        assert_eq!(INFO_SUMMARY_PROMPT, pinned);
        assert!(INFO_SUMMARY_PROMPT.ends_with("Limit to 30 words."));
    }

    #[test]
    fn ensure_session_is_idempotent() {
        let mut store = ConversationStore::new();
        let (a, created) = store.ensure_session(&proxy(1));
        assert!(created);
        let (b, created) = store.ensure_session(&proxy(1));
        assert!(!created);
        assert_eq!(a, b);
        let (c, _) = store.ensure_session(&proxy(2));
        assert_ne!(a, c);
    }

    #[test]
    fn echo_summary_sends_exact_template() {
        let mut store = ConversationStore::new();
        let text = summarize(&mut store, &MockClient::echo(), &FilterPolicy::default(), &proxy(1), &crop(1)).unwrap();
        assert_eq!(text, INFO_SUMMARY_PROMPT);
        assert_eq!(store.for_proxy(ProxyId(1)).unwrap().turns.len(), 2);
    }

    #[test]
    fn failure_leaves_marker() {
        let mut store = ConversationStore::new();
        let err = summarize(&mut store, &MockClient::failing("down"), &FilterPolicy::default(), &proxy(1), &crop(1))
            .unwrap_err();
        assert!(matches!(err, ConversationError::ActionFailed(_)));
        let conv = store.for_proxy(ProxyId(1)).unwrap();
        assert_eq!(conv.turns.len(), 2);
        assert!(conv.turns[1].failed);
        assert!(conv.history().is_empty());
        // retry is allowed
        summarize(&mut store, &MockClient::echo(), &FilterPolicy::default(), &proxy(1), &crop(1)).unwrap();
        assert_eq!(store.for_proxy(ProxyId(1)).unwrap().turns.len(), 4);
    }

    #[test]
    fn empty_question_rejected() {
        let mut store = ConversationStore::new();
        let err = ask(&mut store, &MockClient::echo(), &FilterPolicy::default(), &proxy(1), &crop(1), "  ").unwrap_err();
        assert_eq!(err, ConversationError::EmptyQuestion);
    }

    #[test]
    fn follow_up_carries_history() {
        let client = CaptureClient::new(MockClient::fixed("Cook for 10 minutes"));
        let mut store = ConversationStore::new();
        let p = FilterPolicy::default();
        ask(&mut store, &client, &p, &proxy(1), &crop(1), "how much time do I need to cook this pasta?").unwrap();
        ask(&mut store, &client, &p, &proxy(1), &crop(1), "and al dente?").unwrap();
        let reqs = client.requests();
        assert_eq!(reqs[0].history().len(), 0);
        let h = reqs[1].history();
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].text, "how much time do I need to cook this pasta?");
        assert_eq!(h[1].text, "Cook for 10 minutes");
        assert_eq!(reqs[1].images().len(), 1, "crop is re-sent on every ask");
    }

    #[test]
    fn per_object_isolation() {
        let client = CaptureClient::new(MockClient::echo());
        let mut store = ConversationStore::new();
        let p = FilterPolicy::default();
        ask(&mut store, &client, &p, &proxy(1), &crop(1), "a1").unwrap();
        ask(&mut store, &client, &p, &proxy(2), &crop(2), "b1").unwrap();
        ask(&mut store, &client, &p, &proxy(1), &crop(1), "a2").unwrap();
        let reqs = client.requests();
        let r = &reqs[2];
        assert!(r.history().iter().all(|t| !t.text.starts_with('b')));
        assert_eq!(r.images()[0].image, crop(1).image);
        assert_ne!(reqs[1].conversation(), r.conversation());
    }

    #[test]
    fn truncation_and_refined_label() {
        let long: String = (0..70).map(|i| format!("w{i} ")).collect();
        let cut = truncate_words(&long, DISPLAY_WORD_LIMIT);
        assert_eq!(cut.split_whitespace().count(), 61);
        assert!(cut.ends_with('…'));
        assert_eq!(truncate_words("short one", 60), "short one");
        assert_eq!(
            refined_label_from_summary("Superior Dark Soy Sauce * Price: $3.49").as_deref(),
            Some("Superior Dark Soy Sauce")
        );
        assert_eq!(refined_label_from_summary("Price: $3 * Calories: 10"), None);
    }
}
