//! Ray-traced box scenes with exact depth and ground-truth boxes.
//!
//! Objects are axis-aligned cuboids standing on an optional table plane in
//! front of an optional back wall. Camera convention: x right, y down,
//! z forward. Used for the geometry oracle, the fixture scenes and the
//! benchmarks.

use std::path::PathBuf;

use nalgebra::Vector3;

use crate::detection::Detection;
use crate::geometry::{CameraIntrinsics, DepthFrame, Pose, WorldPoint};
use crate::scene::{ColorFrame, PixelRect, SceneDirectory, SceneFrame};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub label: String,
    pub center: WorldPoint,
    /// Full extents along x, y, z in metres.
    pub size: [f64; 3],
    pub color: [u8; 3],
    pub confidence: f64,
    /// Transparent to the depth sensor: renders color but no depth.
    pub depth_hole: bool,
}

impl SynthObject {
    pub fn new(label: &str, center: [f64; 3], size: [f64; 3], color: [u8; 3]) -> Self {
        Self {
            label: label.into(),
            center: WorldPoint::new(center[0], center[1], center[2]),
            size,
            color,
            confidence: 0.9,
            depth_hole: false,
        }
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = c;
        self
    }

    pub fn with_depth_hole(mut self) -> Self {
        self.depth_hole = true;
        self
    }

    pub fn min(&self) -> Vector3<f64> {
        self.center.to_vector() - Vector3::from(self.size) / 2.0
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center.to_vector() + Vector3::from(self.size) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<SynthObject>,
    /// World y of a horizontal table surface (y grows downward).
    pub table_y: Option<f64>,
    /// World z of a back wall facing the camera.
    pub wall_z: Option<f64>,
    pub background: [u8; 3],
}

/// One rendered view.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub color: ColorFrame,
    /// Millimetres, 0 where there is no return.
    pub depth_mm: Vec<u16>,
    /// Tight boxes around each object's visible pixels.
    pub detections: Vec<Detection>,
}

/// Distance along `dir` to the first intersection with an axis-aligned box,
/// with the face normal axis hit. Slab method.
pub fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<(f64, usize)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let a = (min[i] - origin[i]) / dir[i];
        let b = (max[i] - origin[i]) / dir[i];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo > t_near {
            t_near = lo;
            axis = i;
        }
        t_far = t_far.min(hi);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, axis))
}

fn hash_noise(x: u32, y: u32, salt: u32) -> i32 {
    let mut h = x.wrapping_mul(0x9E37_79B1) ^ y.wrapping_mul(0x85EB_CA77) ^ salt.wrapping_mul(0xC2B2_AE3D);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    (h % 9) as i32 - 4
}

fn shade(rgb: [u8; 3], factor: f64, noise: i32) -> [u8; 3] {
    rgb.map(|c| (f64::from(c) * factor + f64::from(noise)).round().clamp(0.0, 255.0) as u8)
}

impl SynthScene {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            objects: Vec::new(),
            table_y: None,
            wall_z: None,
            background: [40, 40, 48],
        }
    }

    /// Render one frame seen from `pose` (camera to world).
    pub fn render(&self, pose: &Pose, frame: usize) -> Rendered {
        let k = &self.intrinsics;
        let (w, h) = (k.width, k.height);
        let origin = pose.translation().clone_owned();
        let rot = pose.rotation();
        let mut color = ColorFrame::filled(w, h, self.background);
        let mut depth_mm = vec![0u16; (w * h) as usize];
        let mut extents: Vec<Option<(u32, u32, u32, u32)>> = vec![None; self.objects.len()];
        let boxes: Vec<_> = self.objects.iter().map(|o| (o.min(), o.max())).collect();
        for v in 0..h {
            for u in 0..w {
                let ray_cam = Vector3::new((f64::from(u) - k.cx) / k.fx, (f64::from(v) - k.cy) / k.fy, 1.0);
                let dir = rot * ray_cam;
                let mut best: Option<(f64, usize, usize)> = None;
                for (i, (mn, mx)) in boxes.iter().enumerate() {
                    if let Some((t, axis)) = ray_box(&origin, &dir, mn, mx) {
                        if best.is_none_or(|b| t < b.0) {
                            best = Some((t, i, axis));
                        }
                    }
                }
                let idx = (v * w + u) as usize;
                // t is the camera-frame depth because ray_cam has unit z
                if let Some((t, i, axis)) = best {
                    let obj = &self.objects[i];
                    let face = [0.8, 0.65, 1.0][axis];
                    let hit = origin + dir * t;
                    let stripe = ((hit.y - obj.min().y) / obj.size[1] * 6.0) as i64 % 3 == 1;
                    let base = if stripe { shade(obj.color, 0.7, 0) } else { obj.color };
                    color.put_pixel(u, v, shade(base, face, hash_noise(u, v, frame as u32)));
                    if !obj.depth_hole {
                        depth_mm[idx] = (t * 1000.0).round().clamp(0.0, 65535.0) as u16;
                    }
                    let e = &mut extents[i];
                    *e = Some(match *e {
                        None => (u, v, u, v),
                        Some((x0, y0, x1, y1)) => (x0.min(u), y0.min(v), x1.max(u), y1.max(v)),
                    });
                    continue;
                }
                let mut surface: Option<(f64, [u8; 3])> = None;
                if let Some(ty) = self.table_y {
                    let t = (ty - origin.y) / dir.y;
                    if dir.y.abs() > 1e-12 && t > 0.0 {
                        let p = origin + dir * t;
                        let checker = ((p.x * 10.0).floor() + (p.z * 10.0).floor()) as i64 % 2 == 0;
                        surface = Some((t, if checker { [150, 120, 90] } else { [140, 110, 82] }));
                    }
                }
                if let Some(wz) = self.wall_z {
                    let t = (wz - origin.z) / dir.z;
                    if dir.z.abs() > 1e-12 && t > 0.0 && surface.is_none_or(|s| t < s.0) {
                        surface = Some((t, [200, 200, 190]));
                    }
                }
                if let Some((t, rgb)) = surface {
                    color.put_pixel(u, v, shade(rgb, 1.0, hash_noise(u, v, frame as u32)));
                    depth_mm[idx] = (t * 1000.0).round().clamp(0.0, 65535.0) as u16;
                }
            }
        }
        let detections = self
            .objects
            .iter()
            .zip(&extents)
            .filter_map(|(o, e)| {
                let (x0, y0, x1, y1) = (*e)?;
                let bbox = PixelRect::new(
                    i64::from(x0),
                    i64::from(y0),
                    i64::from(x1 - x0 + 1),
                    i64::from(y1 - y0 + 1),
                );
                Detection::new(o.label.clone(), o.confidence, bbox, frame, w, h).ok()
            })
            .collect();
        Rendered {
            color,
            depth_mm,
            detections,
        }
    }

    /// Render every pose into an in-memory scene whose ground truth is the
    /// rendered boxes.
    pub fn to_scene(&self, name: &str, poses: &[Pose]) -> SceneDirectory {
        let k = self.intrinsics;
        let mut frames = Vec::new();
        let mut gt = std::collections::BTreeMap::new();
        for (i, pose) in poses.iter().enumerate() {
            let r = self.render(pose, i);
            gt.insert(i, r.detections);
            frames.push(SceneFrame {
                color: r.color,
                depth: DepthFrame::from_millimeters(k.width, k.height, &r.depth_mm)
                    .expect("rendered to intrinsics size"),
                pose: *pose,
            });
        }
        SceneDirectory {
            path: PathBuf::new(),
            name: name.into(),
            intrinsics: k,
            frames,
            ground_truth: Some(gt),
        }
    }
}
