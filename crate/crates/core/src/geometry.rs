//! Camera models, rigid transforms and RGB-D fusion.
//!
//! World frame is z-up. Camera frames follow the usual computer-vision
//! convention: +x right, +y down, +z forward along the optical axis.
//! Extrinsics map camera coordinates into the world frame.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Largest depth accepted from a sensor, in meters.
pub const MAX_SENSOR_DEPTH: f32 = 10.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("malformed frame `{name}`: {reason}")]
    MalformedFrame { name: String, reason: String },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid workspace bounds: min {min:?} must be < max {max:?} componentwise")]
    InvalidBounds { min: [f64; 3], max: [f64; 3] },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fusion needs at least one frame")]
    EmptyFrameList,
    #[error("rig file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rig file: {0}")]
    Io(#[from] std::io::Error),
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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the principal point at the center and the given
    /// horizontal field of view.
    pub fn from_fov(fov_deg: f64, size: u32) -> Result<Self, GeometryError> {
        let half = size as f64 / 2.0;
        let f = half / (fov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, half, half, size, size)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("zero-sized image".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame point for pixel `(u, v)` at optical-axis depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }

    /// Pixel coordinates and optical-axis depth of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A rotation followed by a translation: `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Builds a transform from a `(w, x, y, z)` quaternion. Quaternions that
    /// are not unit length within 1e-6 are rejected rather than silently
    /// renormalized.
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self, GeometryError> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidArgument(format!("quaternion {q:?} is not unit length (|q| = {norm})")));
        }
        Ok(Self::new(UnitQuaternion::from_quaternion(quat), Vec3::from(translation)))
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Builds a transform whose rotation columns are the given (orthonormal) axes.
    pub fn from_axes(x: Vec3, y: Vec3, z: Vec3, translation: Vec3) -> Self {
        let m = Matrix3::from_columns(&[x, y, z]);
        let rot = Rotation3::from_matrix_unchecked(m);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform::new(inv, -(inv * self.translation))
    }
}

/// One fixed camera's registered color and depth images.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub name: String,
    /// Row-major, 3 bytes per pixel.
    pub rgb: Vec<u8>,
    /// Row-major, meters along the optical axis; 0 marks an invalid pixel.
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
    /// Camera to world.
    pub extrinsics: RigidTransform,
}

impl RgbdFrame {
    pub fn new(
        name: impl Into<String>,
        rgb: Vec<u8>,
        depth: Vec<f32>,
        intrinsics: CameraIntrinsics,
        extrinsics: RigidTransform,
    ) -> Result<Self, GeometryError> {
        let frame = Self { name: name.into(), rgb, depth, intrinsics, extrinsics };
        frame.validate()?;
        if let Some(bad) = frame.depth.iter().find(|d| !(**d == 0.0 || (**d > 0.0 && **d <= MAX_SENSOR_DEPTH))) {
            return Err(frame.malformed(format!("depth value {bad} outside {{0}} ∪ (0, {MAX_SENSOR_DEPTH}]")));
        }
        Ok(frame)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    fn malformed(&self, reason: String) -> GeometryError {
        GeometryError::MalformedFrame { name: self.name.clone(), reason }
    }

    /// Checks the buffer dimensions against the intrinsics.
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        let n = self.intrinsics.pixel_count();
        if self.depth.len() != n {
            return Err(self.malformed(format!("depth has {} values, expected {n}", self.depth.len())));
        }
        if self.rgb.len() != 3 * n {
            return Err(self.malformed(format!("rgb has {} bytes, expected {}", self.rgb.len(), 3 * n)));
        }
        Ok(())
    }

    pub fn is_valid_depth(d: f32) -> bool {
        d > 0.0 && d <= MAX_SENSOR_DEPTH
    }

    pub fn valid_pixel_count(&self) -> usize {
        self.depth.iter().filter(|d| Self::is_valid_depth(**d)).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { points: Vec::with_capacity(n), colors: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: Vec3, color: [u8; 3]) {
        self.points.push(p);
        self.colors.push(color);
    }

    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
        self.colors.extend(other.colors);
    }

    /// Keeps points inside `bounds`, preserving order.
    pub fn crop(self, bounds: &WorkspaceBounds) -> PointCloud {
        let mut out = PointCloud::with_capacity(self.len());
        for (p, c) in self.points.into_iter().zip(self.colors) {
            if bounds.contains(&p) {
                out.push(p, c);
            }
        }
        out
    }
}

/// Axis-aligned box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorkspaceBounds {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeometryError> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if (0..3).all(|i| self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(GeometryError::InvalidBounds { min: self.min, max: self.max })
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vec3 {
        (Vec3::from(self.min) + Vec3::from(self.max)) / 2.0
    }

    pub fn diagonal(&self) -> f64 {
        (Vec3::from(self.max) - Vec3::from(self.min)).norm()
    }
}

/// Backprojects every valid-depth pixel into the world frame, in row-major order.
pub fn backproject(frame: &RgbdFrame) -> Result<PointCloud, GeometryError> {
    frame.validate()?;
    let (w, h) = (frame.width(), frame.height());
    let mut cloud = PointCloud::with_capacity(frame.valid_pixel_count());
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let d = frame.depth[i];
            if !RgbdFrame::is_valid_depth(d) {
                continue;
            }
            let pc = frame.intrinsics.unproject(u as f64, v as f64, d as f64);
            let rgb = &frame.rgb[3 * i..3 * i + 3];
            cloud.push(frame.extrinsics.apply(&pc), [rgb[0], rgb[1], rgb[2]]);
        }
    }
    Ok(cloud)
}

/// Concatenates per-frame backprojections (frame order, then row-major) and
/// crops to `bounds`. Duplicate points are kept.
pub fn fuse(frames: &[RgbdFrame], bounds: &WorkspaceBounds) -> Result<PointCloud, GeometryError> {
    if frames.is_empty() {
        return Err(GeometryError::EmptyFrameList);
    }
    bounds.validate()?;
    let mut cloud = PointCloud::new();
    for frame in frames {
        cloud.extend(backproject(frame)?.crop(bounds));
    }
    Ok(cloud)
}

/// Unit vector from the look-at point towards a camera at `(elev, azim)`.
///
/// Elevation is measured from the xy-plane, azimuth counterclockwise from +x
/// about +z.
pub fn view_direction(elev_deg: f64, azim_deg: f64) -> Vec3 {
    let (e, a) = (elev_deg.to_radians(), azim_deg.to_radians());
    Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
}

/// Camera-to-world pose of a camera at `(elev, azim, distance)` around
/// `look_at`, looking at `look_at`.
///
/// Roll is fixed so that world +z points up in the image. Straight up or
/// down views use world +x as image-up instead.
pub fn pose_from_angles(elev_deg: f64, azim_deg: f64, distance: f64, look_at: Vec3) -> Result<RigidTransform, GeometryError> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("distance must be positive, got {distance}")));
    }
    if !(-90.0..=90.0).contains(&elev_deg) {
        return Err(GeometryError::InvalidArgument(format!("elev {elev_deg} outside [-90, 90]")));
    }
    if !azim_deg.is_finite() {
        return Err(GeometryError::InvalidArgument(format!("azim {azim_deg} is not finite")));
    }
    let dir = view_direction(elev_deg, azim_deg);
    let center = look_at + distance * dir;
    let forward = -dir;

    let world_up = Vec3::z();
    let mut up = world_up - world_up.dot(&forward) * forward;
    if elev_deg.abs() == 90.0 || up.norm() < 1e-9 {
        let x = Vec3::x();
        up = x - x.dot(&forward) * forward;
    }
    let up = up.normalize();
    // Camera +y points down in the image.
    let y_axis = -up;
    let x_axis = forward.cross(&up);
    Ok(RigidTransform::from_axes(x_axis, y_axis, forward, center))
}

/// A named pinhole camera with its world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: RigidTransform,
}

impl CameraModel {
    pub fn center(&self) -> Vec3 {
        self.extrinsics.translation
    }
}

/// Fixed cameras plus the workspace used for cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
    pub workspace_bounds: WorkspaceBounds,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsJson {
    quaternion: [f64; 4],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    name: String,
    intrinsics: CameraIntrinsics,
    extrinsics: ExtrinsicsJson,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigJson {
    cameras: Vec<CameraJson>,
    workspace_bounds: WorkspaceBounds,
}

impl CameraRig {
    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let raw: RigJson = serde_json::from_str(text)?;
        raw.workspace_bounds.validate()?;
        let cameras = raw
            .cameras
            .into_iter()
            .map(|c| {
                c.intrinsics.validate()?;
                Ok(CameraModel {
                    name: c.name,
                    intrinsics: c.intrinsics,
                    extrinsics: RigidTransform::from_wxyz(c.extrinsics.quaternion, c.extrinsics.translation)?,
                })
            })
            .collect::<Result<Vec<_>, GeometryError>>()?;
        Ok(Self { cameras, workspace_bounds: raw.workspace_bounds })
    }

    pub fn to_json(&self) -> String {
        let raw = RigJson {
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraJson {
                    name: c.name.clone(),
                    intrinsics: c.intrinsics,
                    extrinsics: ExtrinsicsJson { quaternion: c.extrinsics.wxyz(), translation: c.extrinsics.translation.into() },
                })
                .collect(),
            workspace_bounds: self.workspace_bounds,
        };
        serde_json::to_string_pretty(&raw).expect("rig serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
