//! Context-menu action catalog, per-action argument schemas, anchored
//! widgets (notes, stopwatch timers, countdowns) and the share/shopping
//! sinks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::anchoring::{CropRef, ObjectProxy};
use crate::geometry::WorldPoint;
use crate::ids::{ProxyId, WidgetId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Information,
    Compare,
    Share,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionId {
    Info,
    Ask,
    Compare,
    SendToContact,
    AddToShoppingList,
    Note,
    Timer,
    Countdown,
}

impl std::fmt::Display for ActionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

impl ActionId {
    pub fn category(self) -> Category {
        match self {
            ActionId::Info | ActionId::Ask => Category::Information,
            ActionId::Compare => Category::Compare,
            ActionId::SendToContact | ActionId::AddToShoppingList => Category::Share,
            ActionId::Note | ActionId::Timer | ActionId::Countdown => Category::Anchor,
        }
    }
}

/// The fixed menu: categories in ring order, each with its actions.
pub const CATALOG: [(Category, &[ActionId]); 4] = [
    (Category::Information, &[ActionId::Info, ActionId::Ask]),
    (Category::Compare, &[ActionId::Compare]),
    (
        Category::Share,
        &[ActionId::SendToContact, ActionId::AddToShoppingList],
    ),
    (
        Category::Anchor,
        &[ActionId::Note, ActionId::Timer, ActionId::Countdown],
    ),
];

pub fn catalog_pairs() -> Vec<(Category, ActionId)> {
    CATALOG
        .iter()
        .flat_map(|(c, actions)| actions.iter().map(move |a| (*c, *a)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActionError {
    #[error("invalid arguments for {action}: {reason}")]
    Validation { action: ActionId, reason: String },
    #[error("clock went backwards: {now} < {last}")]
    ClockRegression { now: u64, last: u64 },
}

fn invalid(action: ActionId, reason: impl Into<String>) -> ActionError {
    ActionError::Validation {
        action,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    #[default]
    Private,
    Group(String),
    Public,
}

/// Validated arguments for one dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionArgs {
    Info,
    Ask { question: String },
    Compare { with: Vec<ProxyId>, prompt: String },
    SendToContact { recipient: String, message: String },
    AddToShoppingList,
    Note { text: String, visibility: Visibility },
    Timer,
    Countdown(CountdownSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountdownSource {
    Seconds(u64),
    /// Parse the duration from the latest answer in that proxy's conversation.
    AnswerOf(ProxyId),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AskArgs {
    question: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareArgs {
    with: Vec<ProxyId>,
    prompt: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareArgs {
    recipient: String,
    #[serde(default)]
    message: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoteArgs {
    text: String,
    #[serde(default)]
    visibility: Visibility,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CountdownArgs {
    seconds: Option<u64>,
    from_answer_of: Option<ProxyId>,
}

/// Longest countdown accepted, one day.
pub const MAX_COUNTDOWN_SECS: u64 = 86_400;

impl ActionArgs {
    pub fn parse(action: ActionId, args: &serde_json::Value) -> Result<Self, ActionError> {
        let args = if args.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            args.clone()
        };
        fn de<T: serde::de::DeserializeOwned>(
            action: ActionId,
            v: serde_json::Value,
        ) -> Result<T, ActionError> {
            serde_json::from_value(v).map_err(|e| invalid(action, e.to_string()))
        }
        let parsed = match action {
            ActionId::Info => de::<Empty>(action, args).map(|_| ActionArgs::Info)?,
            ActionId::Ask => {
                let a: AskArgs = de(action, args)?;
                ActionArgs::Ask {
                    question: a.question,
                }
            }
            ActionId::Compare => {
                let a: CompareArgs = de(action, args)?;
                ActionArgs::Compare {
                    with: a.with,
                    prompt: a.prompt,
                }
            }
            ActionId::SendToContact => {
                let a: ShareArgs = de(action, args)?;
                ActionArgs::SendToContact {
                    recipient: a.recipient,
                    message: a.message,
                }
            }
            ActionId::AddToShoppingList => {
                de::<Empty>(action, args).map(|_| ActionArgs::AddToShoppingList)?
            }
            ActionId::Note => {
                let a: NoteArgs = de(action, args)?;
                ActionArgs::Note {
                    text: a.text,
                    visibility: a.visibility,
                }
            }
            ActionId::Timer => de::<Empty>(action, args).map(|_| ActionArgs::Timer)?,
            ActionId::Countdown => {
                let a: CountdownArgs = de(action, args)?;
                match (a.seconds, a.from_answer_of) {
                    (Some(s), None) => ActionArgs::Countdown(CountdownSource::Seconds(s)),
                    (None, Some(p)) => ActionArgs::Countdown(CountdownSource::AnswerOf(p)),
                    _ => {
                        return Err(invalid(
                            action,
                            "exactly one of `seconds` or `from_answer_of` is required",
                        ))
                    }
                }
            }
        };
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn action(&self) -> ActionId {
        match self {
            ActionArgs::Info => ActionId::Info,
            ActionArgs::Ask { .. } => ActionId::Ask,
            ActionArgs::Compare { .. } => ActionId::Compare,
            ActionArgs::SendToContact { .. } => ActionId::SendToContact,
            ActionArgs::AddToShoppingList => ActionId::AddToShoppingList,
            ActionArgs::Note { .. } => ActionId::Note,
            ActionArgs::Timer => ActionId::Timer,
            ActionArgs::Countdown(_) => ActionId::Countdown,
        }
    }

    pub fn validate(&self) -> Result<(), ActionError> {
        let action = self.action();
        match self {
            ActionArgs::Ask { question } if question.trim().is_empty() => {
                Err(invalid(action, "question must not be empty"))
            }
            ActionArgs::Compare { prompt, .. } if prompt.trim().is_empty() => {
                Err(invalid(action, "prompt must not be empty"))
            }
            ActionArgs::Compare { with, .. } if with.is_empty() => {
                Err(invalid(action, "compare needs at least one other proxy"))
            }
            ActionArgs::SendToContact { recipient, .. } if recipient.trim().is_empty() => {
                Err(invalid(action, "recipient must not be empty"))
            }
            ActionArgs::Note { text, .. } if text.trim().is_empty() => {
                Err(invalid(action, "note text must not be empty"))
            }
            ActionArgs::Note {
                visibility: Visibility::Group(g),
                ..
            } if g.trim().is_empty() => Err(invalid(action, "group name must not be empty")),
            ActionArgs::Countdown(CountdownSource::Seconds(s)) => countdown_seconds(*s),
            _ => Ok(()),
        }
    }
}

pub fn countdown_seconds(s: u64) -> Result<(), ActionError> {
    if s == 0 || s > MAX_COUNTDOWN_SECS {
        Err(invalid(
            ActionId::Countdown,
            format!("duration must be in 1..={MAX_COUNTDOWN_SECS} seconds (got {s})"),
        ))
    } else {
        Ok(())
    }
}

/// First duration mentioned in free text, in seconds ("Cook for 10 minutes" -> 600).
pub fn parse_duration_secs(text: &str) -> Option<u64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"(?i)\b(\d+(?:\.\d+)?)\s*(hours?|hrs?|h|minutes?|mins?|m|seconds?|secs?|s)\b")
            .expect("valid regex")
    });
    let caps = re.captures(text)?;
    let n: f64 = caps[1].parse().ok()?;
    let unit = caps[2].to_ascii_lowercase();
    let scale = match unit.chars().next()? {
        'h' => 3600.0,
        'm' => 60.0,
        _ => 1.0,
    };
    let secs = (n * scale).round();
    (secs >= 1.0).then_some(secs as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WidgetKind {
    Note {
        text: String,
        visibility: Visibility,
    },
    /// Stopwatch counting up from creation.
    Timer { started_at_ms: u64, elapsed_ms: u64 },
    Countdown {
        duration_secs: u64,
        started_at_ms: u64,
        remaining_ms: u64,
        fired: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widget {
    pub id: WidgetId,
    pub proxy: ProxyId,
    pub kind: WidgetKind,
}

impl Widget {
    /// `m:ss` for countdowns and timers, as shown on the anchored label.
    pub fn clock_label(&self) -> Option<String> {
        let ms = match &self.kind {
            WidgetKind::Countdown { remaining_ms, .. } => remaining_ms.div_ceil(1000),
            WidgetKind::Timer { elapsed_ms, .. } => elapsed_ms / 1000,
            WidgetKind::Note { .. } => return None,
        };
        Some(format!("{}:{:02}", ms / 60, ms % 60))
    }
}

/// All widgets of a session plus the virtual time they were last ticked to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidgetBoard {
    widgets: BTreeMap<WidgetId, Widget>,
    next_id: u32,
    last_tick_ms: u64,
}

impl WidgetBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> WidgetId {
        WidgetId(self.next_id + 1)
    }

    pub fn get(&self, id: WidgetId) -> Option<&Widget> {
        self.widgets.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Widget> {
        self.widgets.values()
    }

    pub fn len(&self) -> usize {
        self.widgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widgets.is_empty()
    }

    pub fn last_tick_ms(&self) -> u64 {
        self.last_tick_ms
    }

    /// Build the widget a validated anchor action would create at `now_ms`.
    pub fn build(&self, proxy: ProxyId, args: &ActionArgs, now_ms: u64) -> Option<Widget> {
        let kind = match args {
            ActionArgs::Note { text, visibility } => WidgetKind::Note {
                text: text.clone(),
                visibility: visibility.clone(),
            },
            ActionArgs::Timer => WidgetKind::Timer {
                started_at_ms: now_ms,
                elapsed_ms: 0,
            },
            ActionArgs::Countdown(CountdownSource::Seconds(s)) => WidgetKind::Countdown {
                duration_secs: *s,
                started_at_ms: now_ms,
                remaining_ms: s * 1000,
                fired: false,
            },
            _ => return None,
        };
        Some(Widget {
            id: self.next_id(),
            proxy,
            kind,
        })
    }

    pub fn insert(&mut self, widget: Widget) -> Result<(), String> {
        if widget.id != self.next_id() {
            return Err(format!("widget id {} out of sequence (expected {})", widget.id, self.next_id()));
        }
        if let WidgetKind::Note { text, .. } = &widget.kind {
            if text.trim().is_empty() {
                return Err("empty note".into());
            }
        }
        self.next_id = widget.id.0;
        self.widgets.insert(widget.id, widget);
        Ok(())
    }

    /// Advance to `now_ms`. Returns countdowns that reached zero on this
    /// tick, in widget-id order.
    pub fn tick(&mut self, now_ms: u64) -> Result<Vec<WidgetId>, ActionError> {
        if now_ms < self.last_tick_ms {
            return Err(ActionError::ClockRegression {
                now: now_ms,
                last: self.last_tick_ms,
            });
        }
        self.last_tick_ms = now_ms;
        let mut fired = Vec::new();
        for w in self.widgets.values_mut() {
            match &mut w.kind {
                WidgetKind::Timer {
                    started_at_ms,
                    elapsed_ms,
                } => *elapsed_ms = now_ms.saturating_sub(*started_at_ms),
                WidgetKind::Countdown {
                    duration_secs,
                    started_at_ms,
                    remaining_ms,
                    fired: has_fired,
                } => {
                    let elapsed = now_ms.saturating_sub(*started_at_ms);
                    *remaining_ms = (*duration_secs * 1000).saturating_sub(elapsed).min(*remaining_ms);
                    if *remaining_ms == 0 && !*has_fired {
                        *has_fired = true;
                        fired.push(w.id);
                    }
                }
                WidgetKind::Note { .. } => {}
            }
        }
        Ok(fired)
    }
}

/// Identity of a proxy at the time it was shared or listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySnapshot {
    pub id: ProxyId,
    pub label: String,
    pub refined_label: Option<String>,
    pub world_pos: WorldPoint,
}

impl From<&ObjectProxy> for ProxySnapshot {
    fn from(p: &ObjectProxy) -> Self {
        Self {
            id: p.id,
            label: p.label.clone(),
            refined_label: p.refined_label.clone(),
            world_pos: p.world_pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharePayload {
    pub recipient: String,
    pub message: String,
    pub proxy: ProxySnapshot,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShoppingEntry {
    pub proxy: ProxyId,
    pub label: String,
    pub refined_label: Option<String>,
    pub crop: CropRef,
    pub added_at_ms: u64,
}

/// Where share and shopping-list actions are delivered.
pub trait ShareSink: Send {
    fn deliver(&mut self, payload: &SharePayload) -> std::io::Result<()>;
    fn add_to_shopping_list(&mut self, entry: &ShoppingEntry) -> std::io::Result<()>;
}

/// `outbox/shares.jsonl` and `state/shopping.jsonl` under a data root.
#[derive(Debug, Clone)]
pub struct FileOutbox {
    root: PathBuf,
}

impl FileOutbox {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn shares_path(&self) -> PathBuf {
        self.root.join("outbox").join("shares.jsonl")
    }

    pub fn shopping_path(&self) -> PathBuf {
        self.root.join("state").join("shopping.jsonl")
    }
}

/// Append one JSON line with a single write.
pub fn append_json_line<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut line = serde_json::to_vec(value).map_err(std::io::Error::other)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)
}

impl ShareSink for FileOutbox {
    fn deliver(&mut self, payload: &SharePayload) -> std::io::Result<()> {
        append_json_line(&self.shares_path(), payload)
    }

    fn add_to_shopping_list(&mut self, entry: &ShoppingEntry) -> std::io::Result<()> {
        append_json_line(&self.shopping_path(), entry)
    }
}

/// Keeps deliveries in memory; optionally refuses them.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub shares: Vec<SharePayload>,
    pub shopping: Vec<ShoppingEntry>,
    pub fail: bool,
}

impl ShareSink for MemorySink {
    fn deliver(&mut self, payload: &SharePayload) -> std::io::Result<()> {
        if self.fail {
            return Err(std::io::Error::new(std::io::ErrorKind::PermissionDenied, "sink unwritable"));
        }
        self.shares.push(payload.clone());
        Ok(())
    }

    fn add_to_shopping_list(&mut self, entry: &ShoppingEntry) -> std::io::Result<()> {
        if self.fail {
            return Err(std::io::Error::new(std::io::ErrorKind::PermissionDenied, "sink unwritable"));
        }
        self.shopping.push(entry.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::collections::BTreeSet;

    #[test]
    fn catalog_is_pinned() {
        let pairs: BTreeSet<(Category, ActionId)> = catalog_pairs().into_iter().collect();
        let expected: BTreeSet<(Category, ActionId)> = [
            (Category::Information, ActionId::Info),
            (Category::Information, ActionId::Ask),
            (Category::Compare, ActionId::Compare),
            (Category::Share, ActionId::SendToContact),
            (Category::Share, ActionId::AddToShoppingList),
            (Category::Anchor, ActionId::Note),
            (Category::Anchor, ActionId::Timer),
            (Category::Anchor, ActionId::Countdown),
        ]
        .into_iter()
        .collect();
        assert_eq!(pairs, expected);
        assert_eq!(CATALOG.len(), 4);
        for (c, a) in catalog_pairs() {
            assert_eq!(a.category(), c);
        }
    }

    #[test]
    fn args_validation() {
        assert_eq!(
            ActionArgs::parse(ActionId::Countdown, &json!({"seconds": 600})).unwrap(),
            ActionArgs::Countdown(CountdownSource::Seconds(600))
        );
        assert!(ActionArgs::parse(ActionId::Countdown, &json!({})).is_err());
        assert!(ActionArgs::parse(ActionId::Countdown, &json!({"seconds": 0})).is_err());
        assert!(ActionArgs::parse(ActionId::Note, &json!({"text": ""})).is_err());
        assert!(ActionArgs::parse(ActionId::Note, &json!({"text": "hi", "color": 1})).is_err());
        assert!(ActionArgs::parse(ActionId::SendToContact, &json!({"recipient": " "})).is_err());
        assert_eq!(
            ActionArgs::parse(ActionId::Info, &serde_json::Value::Null).unwrap(),
            ActionArgs::Info
        );
        let note = ActionArgs::parse(
            ActionId::Note,
            &json!({"text": "family recipe", "visibility": {"group": "family"}}),
        )
        .unwrap();
        assert_eq!(
            note,
            ActionArgs::Note {
                text: "family recipe".into(),
                visibility: Visibility::Group("family".into())
            }
        );
        assert_eq!(
            ActionArgs::parse(ActionId::Countdown, &json!({"from_answer_of": "p2"})).unwrap(),
            ActionArgs::Countdown(CountdownSource::AnswerOf(ProxyId(2)))
        );
    }

    #[test]
    fn durations_from_text() {
        assert_eq!(parse_duration_secs("Cook for 10 minutes"), Some(600));
        assert_eq!(parse_duration_secs("about 1.5 hours"), Some(5400));
        assert_eq!(parse_duration_secs("45 sec then stir"), Some(45));
        assert_eq!(parse_duration_secs("boil for 8-10 min"), Some(600));
        assert_eq!(parse_duration_secs("no idea"), None);
    }

    fn board_with_countdown(secs: u64, at: u64) -> (WidgetBoard, WidgetId) {
        let mut b = WidgetBoard::new();
        let w = b
            .build(ProxyId(1), &ActionArgs::Countdown(CountdownSource::Seconds(secs)), at)
            .unwrap();
        let id = w.id;
        b.insert(w).unwrap();
        (b, id)
    }

    #[test]
    fn countdown_fires_once() {
        let (mut b, id) = board_with_countdown(10, 0);
        assert_eq!(b.tick(10_000).unwrap(), vec![id]);
        match &b.get(id).unwrap().kind {
            WidgetKind::Countdown {
                remaining_ms, fired, ..
            } => assert_eq!((*remaining_ms, *fired), (0, true)),
            _ => unreachable!(),
        }
        for t in 1..100 {
            assert!(b.tick(10_000 + t * 1000).unwrap().is_empty());
        }
    }

    #[test]
    fn clock_regression_is_rejected() {
        let (mut b, _) = board_with_countdown(10, 0);
        b.tick(5_000).unwrap();
        assert_eq!(
            b.tick(4_000),
            Err(ActionError::ClockRegression {
                now: 4_000,
                last: 5_000
            })
        );
    }

    #[test]
    fn simultaneous_expiry_fires_in_id_order() {
        let mut b = WidgetBoard::new();
        for (secs, at) in [(7u64, 0u64), (3, 2_000), (4, 1_000)] {
            let w = b
                .build(ProxyId(1), &ActionArgs::Countdown(CountdownSource::Seconds(secs)), at)
                .unwrap();
            b.insert(w).unwrap();
        }
        // Virtual-clock oracle: expiry times are 7000, 5000, 5000 ms.
        let expiry: Vec<(WidgetId, u64)> = vec![(WidgetId(1), 7000), (WidgetId(2), 5000), (WidgetId(3), 5000)];
        let between = |lo: u64, hi: u64| -> Vec<WidgetId> {
            let mut v: Vec<WidgetId> = expiry
                .iter()
                .filter(|(_, t)| *t > lo && *t <= hi)
                .map(|(id, _)| *id)
                .collect();
            v.sort();
            v
        };
        b.tick(2_000).unwrap();
        assert_eq!(b.tick(4_000).unwrap(), between(2_000, 4_000));
        assert_eq!(b.tick(6_000).unwrap(), between(4_000, 6_000));
        assert_eq!(b.tick(6_000).unwrap(), vec![]);
        assert_eq!(b.tick(9_000).unwrap(), between(6_000, 9_000));
    }

    #[test]
    fn timer_counts_up_and_labels() {
        let mut b = WidgetBoard::new();
        let w = b.build(ProxyId(1), &ActionArgs::Timer, 1_000).unwrap();
        b.insert(w).unwrap();
        b.tick(62_500).unwrap();
        assert_eq!(b.get(WidgetId(1)).unwrap().clock_label().unwrap(), "1:01");
        let (b, id) = board_with_countdown(600, 0);
        assert_eq!(b.get(id).unwrap().clock_label().unwrap(), "10:00");
    }

    #[test]
    fn file_outbox_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = FileOutbox::new(dir.path());
        let payload = SharePayload {
            recipient: "Alex".into(),
            message: "look".into(),
            proxy: ProxySnapshot {
                id: ProxyId(1),
                label: "bottle".into(),
                refined_label: Some("Orange juice".into()),
                world_pos: WorldPoint::new(0.0, 0.0, 1.0),
            },
            at_ms: 5,
        };
        sink.deliver(&payload).unwrap();
        sink.deliver(&payload).unwrap();
        let text = fs::read_to_string(sink.shares_path()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: SharePayload = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, payload);
    }
}
