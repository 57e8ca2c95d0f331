//! Multi-object queries over a row of stitched crops.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::anchoring::{AnchorError, ProxyRegistry};
use crate::detection::FilterPolicy;
use crate::geometry::Projection;
use crate::ids::{ConversationId, ProxyId};
use crate::mllm::{HistoryTurn, MllmClient, MllmRequest, PrivacyViolation, RequestImage, Role};
use crate::scene::ColorFrame;

/// Appended to the user's prompt when asking which items matched.
pub const INDEXING_SUBPROMPT: &str = "Considering that the items are ordered from left to right with the first object being index 0, tell me ONLY the correct indices, written as numbers.";

/// Black gap between neighbouring crops.
pub const SEPARATOR_PX: u32 = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComparerError {
    #[error("need at least 2 items to compare (got {0})")]
    TooFew(usize),
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("no index found in reply")]
    NoIndices,
    #[error("index {index} out of range for {n} items")]
    OutOfRange { index: i128, n: usize },
    #[error(transparent)]
    Privacy(#[from] PrivacyViolation),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

/// Concatenate left to right, top-aligned, with black padding below short
/// crops and an 8 px black separator between neighbours.
pub fn stitch(crops: &[&ColorFrame]) -> Result<ColorFrame, ComparerError> {
    if crops.len() < 2 {
        return Err(ComparerError::TooFew(crops.len()));
    }
    let (width, height) = stitched_size(crops.iter().map(|c| (c.width(), c.height())));
    let mut out = ColorFrame::filled(width, height, [0, 0, 0]);
    let mut x0 = 0usize;
    for c in crops {
        let w = c.width() as usize * 3;
        for y in 0..c.height() {
            out.row_mut(y)[x0 * 3..x0 * 3 + w].copy_from_slice(c.row(y));
        }
        x0 += c.width() as usize + SEPARATOR_PX as usize;
    }
    Ok(out)
}

/// Width = Σ widths + 8·(n−1), height = max height.
pub fn stitched_size(sizes: impl Iterator<Item = (u32, u32)>) -> (u32, u32) {
    let (mut w, mut h, mut n) = (0u32, 0u32, 0u32);
    for (cw, ch) in sizes {
        w += cw;
        h = h.max(ch);
        n += 1;
    }
    (w + SEPARATOR_PX * n.saturating_sub(1), h)
}

/// True iff "which" appears as a standalone word, any case.
pub fn is_which_question(prompt: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bwhich\b").expect("valid regex"))
        .is_match(prompt)
}

/// All integer tokens of `reply`, deduplicated and sorted. Any token
/// outside `[0, n)` fails the whole parse.
pub fn extract_indices(reply: &str, n: usize) -> Result<Vec<usize>, ComparerError> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\d+").expect("valid regex"));
    let mut out = Vec::new();
    for m in re.find_iter(reply) {
        let before = reply[..m.start()].chars().rev();
        let mut before = before.peekable();
        let negative = before.next() == Some('-')
            && !before.peek().is_some_and(|c| c.is_alphanumeric());
        let index = m
            .as_str()
            .parse::<i128>()
            .map(|v| if negative { -v } else { v })
            .unwrap_or(i128::MAX);
        if index < 0 || index >= n as i128 {
            return Err(ComparerError::OutOfRange { index, n });
        }
        out.push(index as usize);
    }
    if out.is_empty() {
        return Err(ComparerError::NoIndices);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Left-to-right order of proxies on screen. Points behind the camera go
/// last; ties break on id.
pub fn order_by_screen_x(items: &[(ProxyId, Projection)]) -> Vec<ProxyId> {
    let mut v: Vec<(f64, ProxyId)> = items
        .iter()
        .map(|(id, p)| (p.pixel().map_or(f64::INFINITY, |px| px.u), *id))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    v.into_iter().map(|(_, id)| id).collect()
}

pub fn indexing_reprompt(user_prompt: &str) -> String {
    format!("{} {}", user_prompt.trim_end(), INDEXING_SUBPROMPT)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchedInfo {
    pub width: u32,
    pub height: u32,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparerAnswer {
    Text(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparerJob {
    /// Ordered left to right; index 0 is the leftmost.
    pub proxies: Vec<ProxyId>,
    pub stitched: StitchedInfo,
    pub user_prompt: String,
    pub answer: ComparerAnswer,
    pub indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_error: Option<String>,
}

/// One proxy going into a comparison.
pub struct CompareItem {
    pub proxy: ProxyId,
    pub label: String,
    pub crop: ColorFrame,
    pub projection: Projection,
}

/// Stitched input for a job: order, image and the request image.
pub fn prepare(items: &[CompareItem]) -> Result<(Vec<ProxyId>, RequestImage), ComparerError> {
    if items.len() < 2 {
        return Err(ComparerError::TooFew(items.len()));
    }
    let order = order_by_screen_x(
        &items.iter().map(|i| (i.proxy, i.projection)).collect::<Vec<_>>(),
    );
    let sorted: Vec<&CompareItem> = order
        .iter()
        .map(|id| items.iter().find(|i| i.proxy == *id).expect("ordered from items"))
        .collect();
    let stitched = stitch(&sorted.iter().map(|i| &i.crop).collect::<Vec<_>>())?;
    let image = RequestImage {
        labels: sorted.iter().map(|i| i.label.clone()).collect(),
        image: stitched,
    };
    Ok((order, image))
}

pub fn stitched_info(image: &RequestImage) -> StitchedInfo {
    StitchedInfo {
        width: image.image.width(),
        height: image.image.height(),
        sha256: hex::encode(image.content_hash()),
    }
}

/// Run a comparison in a fresh conversation and, for "which" questions,
/// mark the matching proxies.
pub fn compare(
    client: &dyn MllmClient,
    policy: &FilterPolicy,
    registry: &mut ProxyRegistry,
    conversation: ConversationId,
    items: &[CompareItem],
    prompt: &str,
) -> Result<ComparerJob, ComparerError> {
    if prompt.trim().is_empty() {
        return Err(ComparerError::EmptyPrompt);
    }
    let (order, image) = prepare(items)?;
    let stitched = stitched_info(&image);
    let first = MllmRequest::new(conversation, vec![], vec![image.clone()], prompt, policy)?;
    let answer = match client.query(&first) {
        Ok(r) => r.text,
        Err(e) => {
            return Ok(ComparerJob {
                proxies: order,
                stitched,
                user_prompt: prompt.to_string(),
                answer: ComparerAnswer::Failed(e.to_string()),
                indices: None,
                index_error: None,
            })
        }
    };
    let mut job = ComparerJob {
        proxies: order.clone(),
        stitched,
        user_prompt: prompt.to_string(),
        answer: ComparerAnswer::Text(answer.clone()),
        indices: None,
        index_error: None,
    };
    if !is_which_question(prompt) {
        return Ok(job);
    }
    let history = vec![
        HistoryTurn {
            role: Role::User,
            text: prompt.to_string(),
        },
        HistoryTurn {
            role: Role::Assistant,
            text: answer,
        },
    ];
    let second = MllmRequest::new(conversation, history, vec![image], indexing_reprompt(prompt), policy)?;
    match client
        .query(&second)
        .map_err(|e| e.to_string())
        .and_then(|r| extract_indices(&r.text, order.len()).map_err(|e| e.to_string()))
    {
        Ok(indices) => {
            let ids: Vec<ProxyId> = indices.iter().map(|i| order[*i]).collect();
            registry.mark(&ids)?;
            job.indices = Some(indices);
        }
        Err(e) => job.index_error = Some(e),
    }
    Ok(job)
}
