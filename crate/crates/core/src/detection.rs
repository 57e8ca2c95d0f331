//! Per-frame object detection backends and the class filter policy that
//! decides what may reach cloud-facing components.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::scene::{ColorFrame, PixelRect};

/// The 80 COCO object categories.
pub const COCO_LABELS: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectionError {
    #[error("invalid detection: {0}")]
    Invalid(String),
    #[error("invalid filter policy: {0}")]
    Policy(String),
    #[error("detector backend unavailable: {0}")]
    Unavailable(String),
    #[error("detector returned a malformed response: {0}")]
    Protocol(String),
}

/// A labeled, scored box on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: PixelRect,
    pub frame: usize,
}

impl Detection {
    pub fn new(
        label: impl Into<String>,
        confidence: f64,
        bbox: PixelRect,
        frame: usize,
        width: u32,
        height: u32,
    ) -> Result<Self, DetectionError> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(DetectionError::Invalid("empty label".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DetectionError::Invalid(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        if !bbox.within(width, height) {
            return Err(DetectionError::Invalid(format!(
                "bbox {bbox} not within the {width}x{height} frame"
            )));
        }
        Ok(Self {
            label,
            confidence,
            bbox,
            frame,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    labels: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self, DetectionError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let unique: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
        if unique.len() != labels.len() {
            return Err(DetectionError::Invalid("duplicate vocabulary label".into()));
        }
        Ok(Self { labels })
    }

    pub fn coco() -> Self {
        Self::new(COCO_LABELS).expect("COCO labels are unique")
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Which detections may be processed further.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    denylist: BTreeSet<String>,
    allowlist: BTreeSet<String>,
    min_confidence: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            denylist: BTreeSet::from(["person".to_string()]),
            allowlist: BTreeSet::new(),
            min_confidence: DEFAULT_MIN_CONFIDENCE,
        }
    }
}

impl FilterPolicy {
    pub fn new<D, A>(denylist: D, allowlist: A, min_confidence: f64) -> Result<Self, DetectionError>
    where
        D: IntoIterator,
        D::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        let denylist: BTreeSet<String> = denylist.into_iter().map(Into::into).collect();
        let allowlist: BTreeSet<String> = allowlist.into_iter().map(Into::into).collect();
        if !(0.0..=1.0).contains(&min_confidence) {
            return Err(DetectionError::Policy(format!(
                "min_confidence {min_confidence} outside [0, 1]"
            )));
        }
        if let Some(both) = denylist.intersection(&allowlist).next() {
            return Err(DetectionError::Policy(format!(
                "label {both:?} is both denied and allowed"
            )));
        }
        Ok(Self {
            denylist,
            allowlist,
            min_confidence,
        })
    }

    pub fn with_min_confidence(self, min_confidence: f64) -> Result<Self, DetectionError> {
        Self::new(self.denylist, self.allowlist, min_confidence)
    }

    pub fn with_allowlist<A>(self, allowlist: A) -> Result<Self, DetectionError>
    where
        A: IntoIterator,
        A::Item: Into<String>,
    {
        Self::new(self.denylist, allowlist, self.min_confidence)
    }

    pub fn denylist(&self) -> &BTreeSet<String> {
        &self.denylist
    }

    pub fn allowlist(&self) -> &BTreeSet<String> {
        &self.allowlist
    }

    pub fn min_confidence(&self) -> f64 {
        self.min_confidence
    }

    pub fn is_denied(&self, label: &str) -> bool {
        self.denylist.contains(label)
    }

    fn verdict(&self, det: &Detection) -> Option<SuppressionReason> {
        if self.denylist.contains(&det.label) {
            Some(SuppressionReason::Denylisted)
        } else if !self.allowlist.is_empty() && !self.allowlist.contains(&det.label) {
            Some(SuppressionReason::NotAllowlisted)
        } else if det.confidence < self.min_confidence {
            Some(SuppressionReason::LowConfidence)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionReason {
    Denylisted,
    NotAllowlisted,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppressed {
    pub detection: Detection,
    pub reason: SuppressionReason,
}

/// Split detections into those that pass `policy` and those that don't.
/// Relative order is preserved on both sides.
pub fn apply_policy(dets: Vec<Detection>, policy: &FilterPolicy) -> (Vec<Detection>, Vec<Suppressed>) {
    let mut kept = Vec::new();
    let mut suppressed = Vec::new();
    for det in dets {
        match policy.verdict(&det) {
            None => kept.push(det),
            Some(reason) => suppressed.push(Suppressed {
                detection: det,
                reason,
            }),
        }
    }
    (kept, suppressed)
}

/// A detector box that had to be clipped to the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipNotice {
    pub label: String,
    pub original: PixelRect,
    pub clipped: PixelRect,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectOutput {
    pub detections: Vec<Detection>,
    pub clipped: Vec<ClipNotice>,
    /// Raw boxes dropped as unusable (unknown label, empty after clipping).
    pub rejected: Vec<String>,
}

pub trait Detector: Send {
    fn name(&self) -> &str;

    fn detect(&mut self, frame: &ColorFrame, frame_index: usize) -> Result<DetectOutput, DetectionError>;
}

/// Replays a scene's ground-truth rows.
#[derive(Debug, Clone)]
pub struct ScriptedDetector {
    rows: BTreeMap<usize, Vec<Detection>>,
}

impl ScriptedDetector {
    pub fn new(rows: BTreeMap<usize, Vec<Detection>>) -> Self {
        Self { rows }
    }
}

impl Detector for ScriptedDetector {
    fn name(&self) -> &str {
        "scripted"
    }

    fn detect(&mut self, _frame: &ColorFrame, frame_index: usize) -> Result<DetectOutput, DetectionError> {
        Ok(DetectOutput {
            detections: self.rows.get(&frame_index).cloned().unwrap_or_default(),
            ..DetectOutput::default()
        })
    }
}

/// One box as returned by an external detector service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireDetection {
    pub label: String,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// Turn service output into frame-valid detections, clipping boxes that
/// overhang the frame.
pub fn normalize_wire(
    wire: Vec<WireDetection>,
    frame_index: usize,
    width: u32,
    height: u32,
    vocabulary: &ClassVocabulary,
) -> DetectOutput {
    let mut out = DetectOutput::default();
    let full = PixelRect::full(width, height);
    for w in wire {
        if !vocabulary.contains(&w.label) {
            out.rejected.push(format!("unknown label {:?}", w.label));
            continue;
        }
        let [x, y, bw, bh] = w.bbox;
        if ![x, y, bw, bh, w.confidence].iter().all(|v| v.is_finite()) {
            out.rejected.push(format!("{}: non-finite box", w.label));
            continue;
        }
        let original = PixelRect::covering(x, y, bw, bh);
        let clipped = original.intersect(&full);
        if clipped.is_empty() {
            out.rejected.push(format!("{}: box {original} outside frame", w.label));
            continue;
        }
        if clipped != original {
            out.clipped.push(ClipNotice {
                label: w.label.clone(),
                original,
                clipped,
            });
        }
        match Detection::new(
            w.label.clone(),
            w.confidence.clamp(0.0, 1.0),
            clipped,
            frame_index,
            width,
            height,
        ) {
            Ok(d) => out.detections.push(d),
            Err(e) => out.rejected.push(format!("{}: {e}", w.label)),
        }
    }
    out
}

/// Posts each frame as a PNG body to a detector service and expects a JSON
/// array of `{label, confidence, bbox: [x, y, w, h]}`.
pub struct HttpDetector {
    url: String,
    agent: ureq::Agent,
    vocabulary: ClassVocabulary,
}

impl HttpDetector {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self {
            url: url.into(),
            agent,
            vocabulary: ClassVocabulary::coco(),
        }
    }
}

impl Detector for HttpDetector {
    fn name(&self) -> &str {
        "http"
    }

    fn detect(&mut self, frame: &ColorFrame, frame_index: usize) -> Result<DetectOutput, DetectionError> {
        let body = frame.to_png();
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "image/png")
            .send(&body[..])
            .map_err(|e| DetectionError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(DetectionError::Unavailable(format!("HTTP {}", resp.status())));
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| DetectionError::Unavailable(e.to_string()))?;
        let wire: Vec<WireDetection> =
            serde_json::from_str(&text).map_err(|e| DetectionError::Protocol(e.to_string()))?;
        Ok(normalize_wire(
            wire,
            frame_index,
            frame.width(),
            frame.height(),
            &self.vocabulary,
        ))
    }
}
