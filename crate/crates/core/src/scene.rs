//! Recorded RGB-D scene directories and image crops.
//!
//! Layout of a scene directory:
//!
//! ```text
//! scene.json          manifest (intrinsics, frame count, relative paths)
//! frames/000000.png   8-bit RGB color frames
//! depth/000000.png    16-bit grayscale depth in millimeters, 0 = hole
//! poses.jsonl         one row-major 3x4 camera->world matrix per line
//! detections.jsonl    optional ground truth {frame, label, bbox, confidence}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::detection::{ClassVocabulary, Detection};
use crate::geometry::{CameraIntrinsics, DepthFrame, GeometryError, PixelPoint, Pose};

pub const MANIFEST: &str = "scene.json";

/// Rotation tolerance applied to poses read from disk.
pub const LOAD_POSE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: invalid rotation: {message}")]
    InvalidRotation { path: PathBuf, message: String },
    #[error("{path}: image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl SceneError {
    fn invalid(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        SceneError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| SceneError::Io { path, source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CropError {
    #[error("bounding box {0} does not intersect the {1}x{2} frame")]
    Empty(PixelRect, u32, u32),
}

/// Axis-aligned pixel rectangle covering columns `x..x+w` and rows `y..y+h`.
/// Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<[i64; 4]> for PixelRect {
    fn from([x, y, w, h]: [i64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<PixelRect> for [i64; 4] {
    fn from(r: PixelRect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl std::fmt::Display for PixelRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

impl PixelRect {
    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    /// Smallest integer rect covering a floating-point `[x, y, w, h]` box.
    pub fn covering(x: f64, y: f64, w: f64, h: f64) -> Self {
        let x0 = x.floor() as i64;
        let y0 = y.floor() as i64;
        let x1 = (x + w).ceil() as i64;
        let y1 = (y + h).ceil() as i64;
        Self::new(x0, y0, (x1 - x0).max(0), (y1 - y0).max(0))
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self::new(0, 0, i64::from(width), i64::from(height))
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            self.w * self.h
        }
    }

    pub fn intersect(&self, other: &PixelRect) -> PixelRect {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        PixelRect::new(x0, y0, (x1 - x0).max(0), (y1 - y0).max(0))
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        !self.is_empty() && self.intersect(&PixelRect::full(width, height)) == *self
    }

    /// Center of the covered pixel block.
    pub fn center(&self) -> PixelPoint {
        PixelPoint::new(
            self.x as f64 + (self.w - 1) as f64 / 2.0,
            self.y as f64 + (self.h - 1) as f64 / 2.0,
        )
    }
}

/// 8-bit RGB image, row-major, tightly packed.
#[derive(Clone, PartialEq, Eq)]
pub struct ColorFrame {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ColorFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ColorFrame")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ColorFrame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (width >= 1 && height >= 1 && data.len() == width as usize * height as usize * 3).then_some(
            Self {
                width,
                height,
                data,
            },
        )
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::new(width, height, data).expect("sized from dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * 3;
        &self.data[y as usize * stride..(y as usize + 1) * stride]
    }

    pub fn row_mut(&mut self, y: u32) -> &mut [u8] {
        let stride = self.width as usize * 3;
        &mut self.data[y as usize * stride..(y as usize + 1) * stride]
    }

    pub fn to_png(&self) -> Vec<u8> {
        let img: ImageBuffer<Rgb<u8>, &[u8]> =
            ImageBuffer::from_raw(self.width, self.height, self.data.as_slice())
                .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::new(w, h, img.into_raw()).expect("decoded buffer matches dimensions"))
    }
}

/// Pixels cut from a source frame, with the clipped rect they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropImage {
    pub source_frame: usize,
    pub bbox: PixelRect,
    pub image: ColorFrame,
}

/// Cut `bbox ∩ frame` out of `frame`.
pub fn crop(frame: &ColorFrame, frame_index: usize, bbox: PixelRect) -> Result<CropImage, CropError> {
    let clipped = bbox.intersect(&PixelRect::full(frame.width, frame.height));
    if clipped.is_empty() {
        return Err(CropError::Empty(bbox, frame.width, frame.height));
    }
    let (x0, w) = (clipped.x as usize, clipped.w as usize);
    let mut data = Vec::with_capacity(w * clipped.h as usize * 3);
    for y in clipped.y..clipped.y + clipped.h {
        let row = frame.row(y as u32);
        data.extend_from_slice(&row[x0 * 3..(x0 + w) * 3]);
    }
    Ok(CropImage {
        source_frame: frame_index,
        bbox: clipped,
        image: ColorFrame::new(clipped.w as u32, clipped.h as u32, data)
            .expect("clipped rect is non-empty"),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: Option<String>,
    pub intrinsics: CameraIntrinsics,
    pub frame_count: usize,
    #[serde(default = "default_frames_dir")]
    pub frames: String,
    #[serde(default = "default_depth_dir")]
    pub depth: String,
    #[serde(default = "default_poses")]
    pub poses: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<String>,
}

fn default_frames_dir() -> String {
    "frames".into()
}
fn default_depth_dir() -> String {
    "depth".into()
}
fn default_poses() -> String {
    "poses.jsonl".into()
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFrame {
    pub color: ColorFrame,
    pub depth: DepthFrame,
    pub pose: Pose,
}

/// A fully validated, in-memory scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDirectory {
    pub path: PathBuf,
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<SceneFrame>,
    /// Ground-truth detections keyed by frame, when the scene ships them.
    pub ground_truth: Option<BTreeMap<usize, Vec<Detection>>>,
}

impl SceneDirectory {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, index: usize) -> Option<&SceneFrame> {
        self.frames.get(index)
    }

    pub fn crop(&self, frame: usize, bbox: PixelRect) -> Option<CropImage> {
        crop(&self.frames.get(frame)?.color, frame, bbox).ok()
    }
}

#[derive(Deserialize)]
struct GroundTruthRow {
    frame: usize,
    label: String,
    bbox: PixelRect,
    confidence: f64,
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneDirectory, SceneError> {
    let root = path.as_ref();
    let manifest_path = root.join(MANIFEST);
    let raw = fs::read(&manifest_path).map_err(SceneError::io(&manifest_path))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| SceneError::invalid(&manifest_path, format!("malformed manifest: {e}")))?;
    let k = manifest.intrinsics;
    k.validate()
        .map_err(|e| SceneError::invalid(&manifest_path, e.to_string()))?;
    if manifest.frame_count == 0 {
        return Err(SceneError::invalid(&manifest_path, "frame_count must be at least 1"));
    }

    let frames_dir = root.join(&manifest.frames);
    let depth_dir = root.join(&manifest.depth);
    check_no_extra_files(&frames_dir, manifest.frame_count)?;
    check_no_extra_files(&depth_dir, manifest.frame_count)?;

    let poses = load_poses(&root.join(&manifest.poses), manifest.frame_count)?;

    let mut frames = Vec::with_capacity(manifest.frame_count);
    for (index, pose) in poses.into_iter().enumerate() {
        let color_path = frames_dir.join(frame_file_name(index));
        let color = load_color(&color_path)?;
        if color.width != k.width || color.height != k.height {
            return Err(SceneError::invalid(
                &color_path,
                format!(
                    "dimension mismatch: {}x{} frame, intrinsics say {}x{}",
                    color.width, color.height, k.width, k.height
                ),
            ));
        }
        let depth_path = depth_dir.join(frame_file_name(index));
        let depth = load_depth(&depth_path)?;
        if depth.width() != k.width || depth.height() != k.height {
            return Err(SceneError::invalid(
                &depth_path,
                format!(
                    "dimension mismatch: {}x{} depth, color is {}x{}",
                    depth.width(),
                    depth.height(),
                    k.width,
                    k.height
                ),
            ));
        }
        frames.push(SceneFrame { color, depth, pose });
    }

    let ground_truth = manifest
        .detections
        .as_ref()
        .map(|rel| load_ground_truth(&root.join(rel), &k, manifest.frame_count))
        .transpose()?;

    let name = manifest.name.clone().unwrap_or_else(|| {
        root.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });

    Ok(SceneDirectory {
        path: root.to_path_buf(),
        name,
        intrinsics: k,
        frames,
        ground_truth,
    })
}

fn check_no_extra_files(dir: &Path, frame_count: usize) -> Result<(), SceneError> {
    let entries = fs::read_dir(dir).map_err(SceneError::io(dir))?;
    let mut names: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(SceneError::io(dir))?;
        names.push(entry.file_name().to_string_lossy().into_owned());
    }
    names.sort();
    for name in &names {
        let index = name
            .strip_suffix(".png")
            .filter(|s| s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse::<usize>().ok());
        match index {
            Some(i) if i < frame_count => {}
            _ => {
                return Err(SceneError::invalid(
                    dir.join(name),
                    format!("unexpected file (scene declares {frame_count} frames)"),
                ))
            }
        }
    }
    for i in 0..frame_count {
        if !names.iter().any(|n| *n == frame_file_name(i)) {
            let missing = dir.join(frame_file_name(i));
            return Err(SceneError::Io {
                path: missing,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing frame file"),
            });
        }
    }
    Ok(())
}

fn load_poses(path: &Path, frame_count: usize) -> Result<Vec<Pose>, SceneError> {
    let text = fs::read_to_string(path).map_err(SceneError::io(path))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != frame_count {
        return Err(SceneError::invalid(
            path,
            format!("{} poses for {frame_count} frames", lines.len()),
        ));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let values: Vec<f64> = serde_json::from_str(line).map_err(|e| {
                SceneError::invalid(path, format!("line {}: malformed pose: {e}", i + 1))
            })?;
            let m: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
                SceneError::invalid(
                    path,
                    format!("line {}: pose has {} numbers, expected 12", i + 1, v.len()),
                )
            })?;
            Pose::from_row_major(&m, LOAD_POSE_TOLERANCE).map_err(|e| match e {
                GeometryError::InvalidRotation(message) => SceneError::InvalidRotation {
                    path: path.to_path_buf(),
                    message: format!("line {}: {message}", i + 1),
                },
                other => SceneError::invalid(path, format!("line {}: {other}", i + 1)),
            })
        })
        .collect()
}

fn load_color(path: &Path) -> Result<ColorFrame, SceneError> {
    let bytes = fs::read(path).map_err(SceneError::io(path))?;
    ColorFrame::from_png(&bytes).map_err(|source| SceneError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_depth(path: &Path) -> Result<DepthFrame, SceneError> {
    let bytes = fs::read(path).map_err(SceneError::io(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|source| {
        SceneError::Image {
            path: path.to_path_buf(),
            source,
        }
    })?;
    let image::DynamicImage::ImageLuma16(img) = img else {
        return Err(SceneError::invalid(path, "depth must be a 16-bit grayscale PNG"));
    };
    let (w, h) = img.dimensions();
    DepthFrame::from_millimeters(w, h, img.as_raw())
        .map_err(|e| SceneError::invalid(path, e.to_string()))
}

fn load_ground_truth(
    path: &Path,
    k: &CameraIntrinsics,
    frame_count: usize,
) -> Result<BTreeMap<usize, Vec<Detection>>, SceneError> {
    let text = fs::read_to_string(path).map_err(SceneError::io(path))?;
    let vocabulary = ClassVocabulary::coco();
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: GroundTruthRow = serde_json::from_str(line)
            .map_err(|e| SceneError::invalid(path, format!("line {}: {e}", i + 1)))?;
        if row.frame >= frame_count {
            return Err(SceneError::invalid(
                path,
                format!("line {}: frame {} out of range", i + 1, row.frame),
            ));
        }
        if !vocabulary.contains(&row.label) {
            return Err(SceneError::invalid(
                path,
                format!("line {}: label {:?} not in the class vocabulary", i + 1, row.label),
            ));
        }
        let det = Detection::new(row.label, row.confidence, row.bbox, row.frame, k.width, k.height)
            .map_err(|e| SceneError::invalid(path, format!("line {}: {e}", i + 1)))?;
        out.entry(row.frame).or_default().push(det);
    }
    Ok(out)
}

/// In-memory scene content to be written to disk.
pub struct SceneContent<'a> {
    pub name: &'a str,
    pub intrinsics: CameraIntrinsics,
    pub frames: &'a [(ColorFrame, Vec<u16>, Pose)],
    pub detections: Option<&'a [Detection]>,
}

pub fn write_scene(root: &Path, scene: &SceneContent<'_>) -> Result<(), SceneError> {
    let k = scene.intrinsics;
    for sub in ["frames", "depth"] {
        fs::create_dir_all(root.join(sub)).map_err(SceneError::io(root.join(sub)))?;
    }
    let manifest = Manifest {
        name: Some(scene.name.to_string()),
        intrinsics: k,
        frame_count: scene.frames.len(),
        frames: default_frames_dir(),
        depth: default_depth_dir(),
        poses: default_poses(),
        detections: scene.detections.map(|_| "detections.jsonl".to_string()),
    };
    let mpath = root.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&mpath, text).map_err(SceneError::io(&mpath))?;

    let mut poses = String::new();
    for (i, (color, depth_mm, pose)) in scene.frames.iter().enumerate() {
        let cpath = root.join("frames").join(frame_file_name(i));
        fs::write(&cpath, color.to_png()).map_err(SceneError::io(&cpath))?;
        let dpath = root.join("depth").join(frame_file_name(i));
        let img: ImageBuffer<Luma<u16>, &[u16]> =
            ImageBuffer::from_raw(k.width, k.height, depth_mm.as_slice())
                .ok_or_else(|| SceneError::invalid(&dpath, "depth buffer size mismatch"))?;
        img.save_with_format(&dpath, ImageFormat::Png)
            .map_err(|source| SceneError::Image {
                path: dpath.clone(),
                source,
            })?;
        poses.push_str(&serde_json::to_string(&pose.to_row_major().to_vec()).expect("numbers"));
        poses.push('\n');
    }
    let ppath = root.join("poses.jsonl");
    fs::write(&ppath, poses).map_err(SceneError::io(&ppath))?;

    if let Some(dets) = scene.detections {
        let mut lines = String::new();
        for d in dets {
            let row = serde_json::json!({
                "frame": d.frame,
                "label": d.label,
                "bbox": d.bbox,
                "confidence": d.confidence,
            });
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
        let dpath = root.join("detections.jsonl");
        fs::write(&dpath, lines).map_err(SceneError::io(&dpath))?;
    }
    Ok(())
}
