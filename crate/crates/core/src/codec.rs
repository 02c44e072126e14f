//! Encoding of 8-D keyframe actions into classification targets on a virtual
//! view, and decoding of policy outputs back into world-frame actions.

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::render::VirtualCameraSpec;

pub const DEPTH_BINS: usize = 36;
pub const ROT_BIN_DEG: f64 = 5.0;
pub const ROT_BINS: usize = 72;
pub const DEFAULT_HEATMAP_SIGMA: f64 = 1.5;

/// Position threshold above which coarse and fine predictions disagree.
pub const REFINE_POSITION_THRESHOLD: f64 = 0.01;
/// Rotation threshold (degrees) above which coarse and fine predictions disagree.
pub const REFINE_ROTATION_THRESHOLD_DEG: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("expert action projects to ({u:.2}, {v:.2}), outside the {resolution}x{resolution} view")]
    OutOfView { u: f64, v: f64, resolution: u32 },
    #[error("invalid codec setting: {0}")]
    InvalidSetting(String),
}

/// End-effector keyframe: position, orientation, gripper and collision bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ActionRecord", from = "ActionRecord")]
pub struct ActionVector {
    pub position: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub gripper_open: bool,
    pub collision_allowed: bool,
}

impl ActionVector {
    pub fn new(position: Vec3, rotation: UnitQuaternion<f64>, gripper_open: bool, collision_allowed: bool) -> Self {
        Self { position, rotation, gripper_open, collision_allowed }
    }

    pub fn euler_deg(&self) -> [f64; 3] {
        euler_xyz_deg(&self.rotation)
    }

    /// `[x, y, z, qw, qx, qy, qz]`.
    pub fn to_floats(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [self.position.x, self.position.y, self.position.z, q.w, q.i, q.j, q.k]
    }

    pub fn from_floats(f: [f64; 7], gripper_open: bool, collision_allowed: bool) -> Self {
        let q = UnitQuaternion::new_unchecked(Quaternion::new(f[3], f[4], f[5], f[6]));
        Self::new(Vec3::new(f[0], f[1], f[2]), q, gripper_open, collision_allowed)
    }
}

/// Serialized form of [`ActionVector`]; `quaternion` is `[w, x, y, z]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ActionRecord {
    position: [f64; 3],
    quaternion: [f64; 4],
    euler_deg: [f64; 3],
    gripper_open: bool,
    collision_allowed: bool,
}

impl From<ActionVector> for ActionRecord {
    fn from(a: ActionVector) -> Self {
        let f = a.to_floats();
        Self {
            position: [f[0], f[1], f[2]],
            quaternion: [f[3], f[4], f[5], f[6]],
            euler_deg: a.euler_deg(),
            gripper_open: a.gripper_open,
            collision_allowed: a.collision_allowed,
        }
    }
}

impl From<ActionRecord> for ActionVector {
    fn from(r: ActionRecord) -> Self {
        let [x, y, z] = r.position;
        let [w, i, j, k] = r.quaternion;
        Self::from_floats([x, y, z, w, i, j, k], r.gripper_open, r.collision_allowed)
    }
}

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Rotation `Rx(a) · Ry(b) · Rz(c)` (intrinsic X, then Y, then Z), angles in degrees.
pub fn quat_from_euler_xyz_deg(e: [f64; 3]) -> UnitQuaternion<f64> {
    let qx = UnitQuaternion::from_axis_angle(&Vec3::x_axis(), e[0].to_radians());
    let qy = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), e[1].to_radians());
    let qz = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), e[2].to_radians());
    qx * qy * qz
}

/// Inverse of [`quat_from_euler_xyz_deg`], with the middle angle in
/// `[-90, 90]` and all angles wrapped to `[-180, 180)`. At gimbal lock the
/// third angle is set to zero.
pub fn euler_xyz_deg(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let m = q.to_rotation_matrix();
    let r = m.matrix();
    let sb = r[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    let (a, c) =
        if sb.abs() > 1.0 - 1e-12 { ((r[(2, 1)]).atan2(r[(1, 1)]), 0.0) } else { ((-r[(1, 2)]).atan2(r[(2, 2)]), (-r[(0, 1)]).atan2(r[(0, 0)])) };
    [wrap_deg(a.to_degrees()), wrap_deg(b.to_degrees()), wrap_deg(c.to_degrees())]
}

/// `round(angle / 5) mod 72`.
pub fn rotation_bin(angle_deg: f64) -> usize {
    ((angle_deg / ROT_BIN_DEG).round() as i64).rem_euclid(ROT_BINS as i64) as usize
}

pub fn rotation_bin_center(bin: usize) -> f64 {
    wrap_deg(bin as f64 * ROT_BIN_DEG)
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_distance_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let dot = a.quaternion().dot(b.quaternion()).abs().min(1.0);
    (2.0 * dot.acos()).to_degrees()
}

/// Training target for one keyframe on one virtual view.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedActionTarget {
    pub resolution: u32,
    /// Row-major `R×R` probability map summing to one.
    pub heatmap: Vec<f64>,
    pub depth_bin: usize,
    pub rot_bins: [usize; 3],
    pub gripper_open: bool,
    pub collision_allowed: bool,
    pub refine: bool,
}

impl EncodedActionTarget {
    /// Index into a `[false, true]` logit pair.
    pub fn open_index(&self) -> usize {
        self.gripper_open as usize
    }

    pub fn collision_index(&self) -> usize {
        self.collision_allowed as usize
    }

    pub fn refine_index(&self) -> usize {
        self.refine as usize
    }

    pub fn heatmap_argmax(&self) -> usize {
        argmax(&self.heatmap)
    }
}

/// Per-head logits of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutputs {
    pub resolution: u32,
    pub heatmap_logits: Vec<f64>,
    pub depth_logits: Vec<f64>,
    /// Three consecutive blocks of `ROT_BINS` logits (x, y, z).
    pub rot_logits: Vec<f64>,
    pub open_logits: [f64; 2],
    pub collision_logits: [f64; 2],
    pub refine_logits: [f64; 2],
}

impl PolicyOutputs {
    pub fn zeros(resolution: u32) -> Self {
        let r = resolution as usize;
        Self {
            resolution,
            heatmap_logits: vec![0.0; r * r],
            depth_logits: vec![0.0; DEPTH_BINS],
            rot_logits: vec![0.0; 3 * ROT_BINS],
            open_logits: [0.0; 2],
            collision_logits: [0.0; 2],
            refine_logits: [0.0; 2],
        }
    }

    /// Logits that put `scale` on every target class (and scaled target mass
    /// on the heatmap).
    pub fn from_target(t: &EncodedActionTarget, scale: f64) -> Self {
        let mut out = Self::zeros(t.resolution);
        out.heatmap_logits = t.heatmap.iter().map(|p| p * scale).collect();
        out.depth_logits[t.depth_bin] = scale;
        for (axis, &bin) in t.rot_bins.iter().enumerate() {
            out.rot_logits[axis * ROT_BINS + bin] = scale;
        }
        out.open_logits[t.open_index()] = scale;
        out.collision_logits[t.collision_index()] = scale;
        out.refine_logits[t.refine_index()] = scale;
        out
    }

    pub fn rot_axis(&self, axis: usize) -> &[f64] {
        &self.rot_logits[axis * ROT_BINS..(axis + 1) * ROT_BINS]
    }

    pub fn refine_fires(&self) -> bool {
        argmax(&self.refine_logits) == 1
    }

    pub fn is_finite(&self) -> bool {
        self.heatmap_logits
            .iter()
            .chain(&self.depth_logits)
            .chain(&self.rot_logits)
            .chain(&self.open_logits)
            .chain(&self.collision_logits)
            .chain(&self.refine_logits)
            .all(|x| x.is_finite())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCodec {
    /// Gaussian heatmap standard deviation in pixels; truncated at 3σ.
    pub sigma_px: f64,
    /// Workspace diagonal; sets the depth classification range.
    pub workspace_diagonal: f64,
    /// Half extent of the global view. Views zoomed below it shrink their
    /// depth range by the same factor as their lateral extent.
    pub reference_half_extent: f64,
}

impl ActionCodec {
    pub fn new(sigma_px: f64, workspace_diagonal: f64, reference_half_extent: f64) -> Result<Self, CodecError> {
        if !(sigma_px > 0.0 && workspace_diagonal > 0.0 && reference_half_extent > 0.0) {
            return Err(CodecError::InvalidSetting(format!(
                "sigma ({sigma_px}), workspace diagonal ({workspace_diagonal}) and reference half extent \
                 ({reference_half_extent}) must be positive"
            )));
        }
        Ok(Self { sigma_px, workspace_diagonal, reference_half_extent })
    }

    /// Depth classification span for `spec`: the workspace diagonal, scaled
    /// down by the zoom factor for views narrower than the reference view.
    pub fn depth_span(&self, spec: &VirtualCameraSpec) -> f64 {
        self.workspace_diagonal * (spec.half_extent / self.reference_half_extent).min(1.0)
    }

    pub fn depth_range(&self, spec: &VirtualCameraSpec) -> (f64, f64) {
        spec.depth_range(self.depth_span(spec))
    }

    pub fn depth_bin_width(&self, spec: &VirtualCameraSpec) -> f64 {
        self.depth_span(spec) / DEPTH_BINS as f64
    }

    pub fn depth_bin(&self, spec: &VirtualCameraSpec, depth: f64) -> usize {
        let (lo, hi) = self.depth_range(spec);
        let b = (DEPTH_BINS as f64 * (depth - lo) / (hi - lo)).floor();
        b.clamp(0.0, (DEPTH_BINS - 1) as f64) as usize
    }

    pub fn depth_bin_center(&self, spec: &VirtualCameraSpec, bin: usize) -> f64 {
        let (lo, _) = self.depth_range(spec);
        lo + (bin as f64 + 0.5) * self.depth_bin_width(spec)
    }

    /// Worst-case encode→decode position error on `spec`: half a pixel
    /// diagonal plus half a depth bin.
    pub fn quantization_bound(&self, spec: &VirtualCameraSpec) -> f64 {
        spec.half_extent * 2f64.sqrt() / spec.resolution as f64 + self.depth_bin_width(spec) / 2.0
    }

    /// Truncated, renormalized Gaussian centered at continuous pixel `(u, v)`.
    pub fn gaussian_heatmap(&self, resolution: u32, u: f64, v: f64) -> Vec<f64> {
        let r = resolution as usize;
        let s2 = 2.0 * self.sigma_px * self.sigma_px;
        let cutoff = 3.0 * self.sigma_px;
        let mut map = vec![0.0; r * r];
        let x0 = ((u - cutoff).floor().max(0.0)) as usize;
        let x1 = ((u + cutoff).ceil().min(r as f64 - 1.0)).max(0.0) as usize;
        let y0 = ((v - cutoff).floor().max(0.0)) as usize;
        let y1 = ((v + cutoff).ceil().min(r as f64 - 1.0)).max(0.0) as usize;
        let mut total = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - u, y as f64 + 0.5 - v);
                let d2 = dx * dx + dy * dy;
                if d2.sqrt() <= cutoff {
                    let w = (-d2 / s2).exp();
                    map[y * r + x] = w;
                    total += w;
                }
            }
        }
        for w in &mut map {
            *w /= total;
        }
        map
    }

    pub fn encode(&self, action: &ActionVector, spec: &VirtualCameraSpec, refine: bool) -> Result<EncodedActionTarget, CodecError> {
        let (u, v, depth) = spec.world_to_pixel(&action.position);
        let r = spec.resolution as f64;
        if !(u >= 0.0 && u < r && v >= 0.0 && v < r) {
            return Err(CodecError::OutOfView { u, v, resolution: spec.resolution });
        }
        let euler = action.euler_deg();
        Ok(EncodedActionTarget {
            resolution: spec.resolution,
            heatmap: self.gaussian_heatmap(spec.resolution, u, v),
            depth_bin: self.depth_bin(spec, depth),
            rot_bins: [rotation_bin(euler[0]), rotation_bin(euler[1]), rotation_bin(euler[2])],
            gripper_open: action.gripper_open,
            collision_allowed: action.collision_allowed,
            refine,
        })
    }

    /// Decodes the arg-max of every head. The result always lies inside the
    /// view volume of `spec`.
    ///
    /// Panics if `outputs` was produced for a different resolution.
    pub fn decode(&self, outputs: &PolicyOutputs, spec: &VirtualCameraSpec) -> ActionVector {
        let r = spec.resolution as usize;
        assert_eq!(outputs.heatmap_logits.len(), r * r, "heatmap logits do not match the view resolution");
        let k = argmax(&outputs.heatmap_logits);
        let (u, v) = ((k % r) as f64 + 0.5, (k / r) as f64 + 0.5);
        let depth = self.depth_bin_center(spec, argmax(&outputs.depth_logits));
        let position = spec.projector().unproject(u, v, depth);
        let euler = [0, 1, 2].map(|axis| rotation_bin_center(argmax(outputs.rot_axis(axis))));
        ActionVector {
            position,
            rotation: quat_from_euler_xyz_deg(euler),
            gripper_open: argmax(&outputs.open_logits) == 1,
            collision_allowed: argmax(&outputs.collision_logits) == 1,
        }
    }
}

/// Does the fine prediction move the action by more than 1 cm or 5°?
pub fn label_refine(coarse: &ActionVector, fine: &ActionVector) -> bool {
    (coarse.position - fine.position).norm() > REFINE_POSITION_THRESHOLD
        || rotation_distance_deg(&coarse.rotation, &fine.rotation) > REFINE_ROTATION_THRESHOLD_DEG
}
