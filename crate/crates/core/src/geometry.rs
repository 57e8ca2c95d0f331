//! Pinhole camera math.
//!
//! Pixels are continuous coordinates where pixel `(i, j)` has its center at
//! `(i as f64, j as f64)`. Camera frame is x right, y down, z forward.
//! Poses map camera coordinates into world coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Default side length of the depth sampling window.
pub const DEFAULT_DEPTH_WINDOW: usize = 5;

/// Tolerance used by [`Pose::new`] for orthonormality and determinant.
pub const POSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} frame")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("depth window must be one of 1, 3, 5, 7 (got {0})")]
    InvalidWindow(usize),
    #[error("depth frame buffer has {got} samples, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be at least 1");
        }
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return bad("focal lengths must be positive and finite");
        }
        if !(self.cx.is_finite() && self.cx >= 0.0 && self.cx < f64::from(self.width)) {
            return bad("cx must lie in [0, width)");
        }
        if !(self.cy.is_finite() && self.cy >= 0.0 && self.cy < f64::from(self.height)) {
            return bad("cy must lie in [0, height)");
        }
        Ok(())
    }

    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < f64::from(self.width) && p.v < f64::from(self.height)
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::with_tolerance(rotation, translation, POSE_TOLERANCE)
    }

    /// Checks the rotation against `tol`, then snaps it to the nearest proper
    /// rotation so the stored pose always meets [`POSE_TOLERANCE`].
    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tol: f64,
    ) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > tol {
            return Err(GeometryError::InvalidRotation(format!(
                "determinant {det:.6} is not +1"
            )));
        }
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if residual > tol {
            return Err(GeometryError::InvalidRotation(format!(
                "not orthonormal (max |RᵀR - I| = {residual:.3e})"
            )));
        }
        let rotation = if residual > 0.0 {
            nearest_rotation(&rotation)
        } else {
            rotation
        };
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn from_row_major(m: &[f64; 12], tol: f64) -> Result<Self, GeometryError> {
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vector3::new(m[3], m[7], m[11]);
        Self::with_tolerance(r, t, tol)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> WorldPoint {
        WorldPoint::from_vector(&self.translation)
    }

    pub fn camera_to_world(&self, p: CameraPoint) -> WorldPoint {
        WorldPoint::from_vector(&(self.rotation * p.to_vector() + self.translation))
    }

    pub fn world_to_camera(&self, w: WorldPoint) -> CameraPoint {
        CameraPoint::from_vector(&(self.rotation.transpose() * (w.to_vector() - self.translation)))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

macro_rules! point3 {
    ($name:ident) => {
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub x: f64,
            pub y: f64,
            pub z: f64,
        }

        impl $name {
            pub const fn new(x: f64, y: f64, z: f64) -> Self {
                Self { x, y, z }
            }

            pub fn from_vector(v: &Vector3<f64>) -> Self {
                Self::new(v.x, v.y, v.z)
            }

            pub fn to_vector(self) -> Vector3<f64> {
                Vector3::new(self.x, self.y, self.z)
            }

            pub fn is_finite(&self) -> bool {
                self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
            }

            pub fn distance(&self, other: &Self) -> f64 {
                (self.to_vector() - other.to_vector()).norm()
            }
        }
    };
}

point3!(CameraPoint);
point3!(WorldPoint);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Result of projecting a world point into the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Visible(PixelPoint),
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<PixelPoint> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

/// Metric depth map. A sample is valid iff it is finite and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, depth: Vec<f64>) -> Result<Self, GeometryError> {
        let expected = width as usize * height as usize;
        if depth.len() != expected {
            return Err(GeometryError::BufferSize {
                expected,
                got: depth.len(),
            });
        }
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    /// 16-bit millimeter samples; zero marks a hole.
    pub fn from_millimeters(width: u32, height: u32, mm: &[u16]) -> Result<Self, GeometryError> {
        let depth = mm
            .iter()
            .map(|&v| if v == 0 { 0.0 } else { f64::from(v) / 1000.0 })
            .collect();
        Self::new(width, height, depth)
    }

    pub fn uniform(width: u32, height: u32, depth: f64) -> Self {
        Self::new(width, height, vec![depth; width as usize * height as usize])
            .expect("buffer sized from dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Depth at integer pixel, `None` when the sample is a hole.
    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let i = y as usize * self.width as usize + x as usize;
        self.valid[i].then(|| self.depth[i])
    }

    pub fn set_invalid(&mut self, x: u32, y: u32) {
        let i = y as usize * self.width as usize + x as usize;
        self.valid[i] = false;
        self.depth[i] = 0.0;
    }
}

pub fn backproject(
    p: PixelPoint,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<CameraPoint, GeometryError> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(GeometryError::InvalidDepth(depth));
    }
    if !(p.u.is_finite() && p.v.is_finite()) || !k.contains(p) {
        return Err(out_of_bounds(p, k.width, k.height));
    }
    Ok(CameraPoint::new(
        (p.u - k.cx) * depth / k.fx,
        (p.v - k.cy) * depth / k.fy,
        depth,
    ))
}

/// The returned pixel may fall outside the frame; callers clip.
pub fn project(w: WorldPoint, pose: &Pose, k: &CameraIntrinsics) -> Projection {
    let c = pose.world_to_camera(w);
    if c.z <= 0.0 {
        return Projection::BehindCamera;
    }
    Projection::Visible(PixelPoint::new(
        k.fx * c.x / c.z + k.cx,
        k.fy * c.y / c.z + k.cy,
    ))
}

/// Median of the valid samples in a `window`×`window` neighbourhood around
/// the rounded pixel. Even counts average the two middle samples.
pub fn sample_depth(
    df: &DepthFrame,
    p: PixelPoint,
    window: usize,
) -> Result<Option<f64>, GeometryError> {
    if !matches!(window, 1 | 3 | 5 | 7) {
        return Err(GeometryError::InvalidWindow(window));
    }
    let (cu, cv) = (p.u.round(), p.v.round());
    if !(cu.is_finite() && cv.is_finite())
        || cu < 0.0
        || cv < 0.0
        || cu >= f64::from(df.width)
        || cv >= f64::from(df.height)
    {
        return Err(out_of_bounds(p, df.width, df.height));
    }
    let (cu, cv) = (cu as i64, cv as i64);
    let half = (window / 2) as i64;
    let mut samples = Vec::with_capacity(window * window);
    for y in (cv - half).max(0)..=(cv + half).min(i64::from(df.height) - 1) {
        for x in (cu - half).max(0)..=(cu + half).min(i64::from(df.width) - 1) {
            if let Some(d) = df.get(x as u32, y as u32) {
                samples.push(d);
            }
        }
    }
    Ok(median(&mut samples))
}

fn median(samples: &mut [f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    Some(if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    })
}

/// Sample depth at `p`, back-project, and move into world space.
/// `Ok(None)` means the neighbourhood held no valid depth.
pub fn raycast_to_world(
    p: PixelPoint,
    df: &DepthFrame,
    k: &CameraIntrinsics,
    pose: &Pose,
    window: usize,
) -> Result<Option<WorldPoint>, GeometryError> {
    let Some(depth) = sample_depth(df, p, window)? else {
        return Ok(None);
    };
    let cam = backproject(p, depth, k)?;
    Ok(Some(pose.camera_to_world(cam)))
}

fn out_of_bounds(p: PixelPoint, width: u32, height: u32) -> GeometryError {
    GeometryError::OutOfBounds {
        u: p.u,
        v: p.v,
        width,
        height,
    }
}

/// Rotation about the camera's y axis (yaw) by `radians`.
pub fn yaw(radians: f64) -> Matrix3<f64> {
    let (s, c) = radians.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the camera's x axis (pitch) by `radians`.
pub fn pitch(radians: f64) -> Matrix3<f64> {
    let (s, c) = radians.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(200.0, 210.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let k = k();
        let c = backproject(PixelPoint::new(k.cx, k.cy), 1.0, &k).unwrap();
        assert_eq!(c, CameraPoint::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn one_focal_length_off_center() {
        let k = k();
        let c = backproject(PixelPoint::new(k.cx + k.fx, k.cy), 2.0, &k).unwrap();
        assert_eq!(c, CameraPoint::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn backproject_rejects_bad_depth_and_bounds() {
        let k = k();
        let p = PixelPoint::new(10.0, 10.0);
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                backproject(p, d, &k),
                Err(GeometryError::InvalidDepth(_))
            ));
        }
        assert!(matches!(
            backproject(PixelPoint::new(640.0, 10.0), 1.0, &k),
            Err(GeometryError::OutOfBounds { .. })
        ));
        assert!(matches!(
            backproject(PixelPoint::new(-0.1, 10.0), 1.0, &k),
            Err(GeometryError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 1, 1).is_ok());
    }

    #[test]
    fn project_on_axis() {
        let k = k();
        let p = project(WorldPoint::new(0.0, 0.0, 1.0), &Pose::identity(), &k);
        assert_eq!(p, Projection::Visible(PixelPoint::new(k.cx, k.cy)));
    }

    #[test]
    fn behind_camera_iff_nonpositive_z() {
        let k = k();
        let pose = Pose::new(yaw(0.7) * pitch(-0.2), Vector3::new(0.3, -1.0, 2.0)).unwrap();
        for ix in -4..=4 {
            for iy in -4..=4 {
                for iz in -4..=4 {
                    let cam = CameraPoint::new(ix as f64 * 0.5, iy as f64 * 0.5, iz as f64 * 0.25);
                    let w = pose.camera_to_world(cam);
                    let behind = project(w, &pose, &k) == Projection::BehindCamera;
                    // The camera->world->camera round trip perturbs z by a few ulps.
                    let z = pose.world_to_camera(w).z;
                    assert_eq!(behind, z <= 0.0, "cam={cam:?}");
                    if iz != 0 {
                        assert_eq!(behind, iz < 0);
                    }
                }
            }
        }
    }

    #[test]
    fn pose_rejects_reflection() {
        let mut r = Matrix3::identity();
        r[(2, 2)] = -1.0;
        let err = Pose::new(r, Vector3::zeros()).unwrap_err();
        assert!(err.to_string().contains("invalid rotation"));
    }

    #[test]
    fn pose_snaps_small_errors() {
        let mut r = yaw(0.3);
        r[(0, 0)] += 5e-5;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        let p = Pose::with_tolerance(r, Vector3::zeros(), 1e-4).unwrap();
        let res = (p.rotation().transpose() * p.rotation() - Matrix3::identity()).abs().max();
        assert!(res < POSE_TOLERANCE);
        assert!((p.rotation().determinant() - 1.0).abs() < POSE_TOLERANCE);
    }

    #[test]
    fn row_major_roundtrip() {
        let pose = Pose::new(yaw(0.4), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let back = Pose::from_row_major(&pose.to_row_major(), 1e-9).unwrap();
        assert_eq!(pose, back);
    }

    #[test]
    fn uniform_plane_window_median() {
        let df = DepthFrame::uniform(64, 48, 1.5);
        for w in [1, 3, 5, 7] {
            let d = sample_depth(&df, PixelPoint::new(20.2, 30.7), w).unwrap();
            assert_eq!(d, Some(1.5));
        }
    }

    #[test]
    fn all_invalid_neighbourhood_is_no_depth() {
        let mut df = DepthFrame::uniform(16, 16, 1.0);
        for y in 5..=11 {
            for x in 5..=11 {
                df.set_invalid(x, y);
            }
        }
        assert_eq!(sample_depth(&df, PixelPoint::new(8.0, 8.0), 7).unwrap(), None);
        assert!(sample_depth(&df, PixelPoint::new(8.0, 8.0), 9).is_err());
        assert!(sample_depth(&df, PixelPoint::new(16.0, 8.0), 3).is_err());
    }

    #[test]
    fn median_rejects_single_outlier() {
        // 12 valid samples at 1.0, one outlier at 9.0, 12 holes.
        let mut depth = vec![0.0; 25];
        for d in depth.iter_mut().take(12) {
            *d = 1.0;
        }
        depth[12] = 9.0;
        let df = DepthFrame::new(5, 5, depth).unwrap();
        // Oracle: sort the explicit 13-sample list and take the middle.
        let mut list = vec![1.0; 12];
        list.push(9.0);
        list.sort_by(f64::total_cmp);
        assert_eq!(list[list.len() / 2], 1.0);
        assert_eq!(sample_depth(&df, PixelPoint::new(2.0, 2.0), 5).unwrap(), Some(1.0));
    }

    #[test]
    fn raycast_identity_and_translation() {
        let k = k();
        let df = DepthFrame::uniform(640, 480, 2.0);
        let p = PixelPoint::new(k.cx, k.cy);
        let w = raycast_to_world(p, &df, &k, &Pose::identity(), 5).unwrap().unwrap();
        assert_eq!(w, WorldPoint::new(0.0, 0.0, 2.0));
        let t = Vector3::new(0.5, -0.25, 1.0);
        let w = raycast_to_world(p, &df, &k, &Pose::from_translation(t), 5)
            .unwrap()
            .unwrap();
        assert_eq!(w, WorldPoint::new(0.5, -0.25, 3.0));
    }

    #[test]
    fn millimeter_decoding() {
        let df = DepthFrame::from_millimeters(2, 1, &[0, 1500]).unwrap();
        assert_eq!(df.get(0, 0), None);
        assert_eq!(df.get(1, 0), Some(1.5));
    }

    fn arb_intrinsics() -> impl Strategy<Value = CameraIntrinsics> {
        (1u32..2000, 1u32..2000, 10.0f64..2000.0, 10.0f64..2000.0, 0.0f64..1.0, 0.0f64..1.0)
            .prop_map(|(w, h, fx, fy, a, b)| {
                let cx = (a * f64::from(w)).min(f64::from(w) - 1e-3).max(0.0);
                let cy = (b * f64::from(h)).min(f64::from(h) - 1e-3).max(0.0);
                CameraIntrinsics::new(fx, fy, cx, cy, w, h).unwrap()
            })
    }

    proptest! {
        #[test]
        fn sample_depth_is_permutation_invariant(
            mut samples in proptest::collection::vec(prop_oneof![Just(0.0), 0.1f64..10.0], 9),
            seed in any::<u64>(),
        ) {
            let df = DepthFrame::new(3, 3, samples.clone()).unwrap();
            let a = sample_depth(&df, PixelPoint::new(1.0, 1.0), 3).unwrap();
            // deterministic shuffle
            let mut s = seed;
            for i in (1..samples.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                samples.swap(i, (s >> 33) as usize % (i + 1));
            }
            let df2 = DepthFrame::new(3, 3, samples.clone()).unwrap();
            let b = sample_depth(&df2, PixelPoint::new(1.0, 1.0), 3).unwrap();
            prop_assert_eq!(a, b);
            let valid: Vec<f64> = samples.iter().copied().filter(|d| *d > 0.0).collect();
            if valid.len() % 2 == 1 {
                prop_assert!(valid.contains(&a.unwrap()));
            }
            if valid.is_empty() {
                prop_assert_eq!(a, None);
            }
        }

        #[test]
        fn backproject_project_roundtrip(
            k in arb_intrinsics(),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            d in 0.05f64..50.0,
        ) {
            let p = PixelPoint::new(a * (f64::from(k.width) - 1e-6), b * (f64::from(k.height) - 1e-6));
            let c = backproject(p, d, &k).unwrap();
            let q = project(WorldPoint::new(c.x, c.y, c.z), &Pose::identity(), &k).pixel().unwrap();
            prop_assert!(q.distance(&p) < 1e-6);
        }
    }
}
