//! Orthographic z-buffered point splatting from a virtual camera.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_from_angles, GeometryError, PointCloud, RigidTransform, Vec3};

pub const DEPTH_MAGIC: &[u8; 4] = b"VEYD";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid virtual camera: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Image(#[from] image::ImageError),
    #[error("spec sidecar: {0}")]
    Json(#[from] serde_json::Error),
    #[error("depth raster: {0}")]
    Format(String),
}

/// Orthographic virtual camera looking at `look_at` from `(elev, azim)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualCameraSpec {
    pub elev: f64,
    pub azim: f64,
    pub distance: f64,
    pub look_at: [f64; 3],
    /// Half width (= half height) of the view volume in meters.
    pub half_extent: f64,
    /// Square image side in pixels.
    pub resolution: u32,
}

impl VirtualCameraSpec {
    pub fn new(elev: f64, azim: f64, distance: f64, look_at: Vec3, half_extent: f64, resolution: u32) -> Result<Self, RenderError> {
        let spec = Self { elev, azim, distance, look_at: look_at.into(), half_extent, resolution };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.half_extent > 0.0 && self.half_extent.is_finite()) {
            return Err(RenderError::InvalidSpec(format!("half_extent must be positive, got {}", self.half_extent)));
        }
        if self.resolution < 16 {
            return Err(RenderError::InvalidSpec(format!("resolution must be >= 16, got {}", self.resolution)));
        }
        if !(-90.0..=90.0).contains(&self.elev) {
            return Err(RenderError::InvalidSpec(format!("elev {} outside [-90, 90]", self.elev)));
        }
        if !(self.distance > 0.0 && self.distance.is_finite()) {
            return Err(RenderError::InvalidSpec(format!("distance must be positive, got {}", self.distance)));
        }
        Ok(())
    }

    pub fn look_at(&self) -> Vec3 {
        Vec3::from(self.look_at)
    }

    /// Camera-to-world pose.
    pub fn pose(&self) -> RigidTransform {
        pose_from_angles(self.elev, self.azim, self.distance, self.look_at()).expect("validated spec has a valid pose")
    }

    /// World-space width of one pixel.
    pub fn pixel_size(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    /// Side of the square splat footprint in pixels.
    pub fn splat_side(&self) -> u32 {
        self.resolution.div_ceil(128)
    }

    /// Optical-axis depth interval covered by a workspace of the given diagonal
    /// centered on the look-at point.
    pub fn depth_range(&self, workspace_diagonal: f64) -> (f64, f64) {
        (self.distance - workspace_diagonal / 2.0, self.distance + workspace_diagonal / 2.0)
    }

    pub fn projector(&self) -> Projector {
        Projector::new(self)
    }

    /// Continuous pixel coordinates and optical-axis depth of a world point.
    /// Points outside the view volume return out-of-range coordinates.
    pub fn world_to_pixel(&self, p: &Vec3) -> (f64, f64, f64) {
        self.projector().project(p)
    }

    pub fn pixel_to_world(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, RenderError> {
        if !depth.is_finite() || !u.is_finite() || !v.is_finite() {
            return Err(RenderError::Usage(format!("pixel_to_world needs finite inputs, got ({u}, {v}, {depth})")));
        }
        Ok(self.projector().unproject(u, v, depth))
    }
}

/// Precomputed orthographic projection for one spec.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    world_to_cam: Matrix3<f64>,
    cam_to_world: Matrix3<f64>,
    center: Vec3,
    scale: f64,
    half_res: f64,
}

impl Projector {
    pub fn new(spec: &VirtualCameraSpec) -> Self {
        let pose = spec.pose();
        let cam_to_world = *pose.rotation.to_rotation_matrix().matrix();
        Self {
            world_to_cam: cam_to_world.transpose(),
            cam_to_world,
            center: pose.translation,
            scale: spec.resolution as f64 / (2.0 * spec.half_extent),
            half_res: spec.resolution as f64 / 2.0,
        }
    }

    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.world_to_cam * (p - self.center);
        (self.half_res + c.x * self.scale, self.half_res + c.y * self.scale, c.z)
    }

    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let c = Vec3::new((u - self.half_res) / self.scale, (v - self.half_res) / self.scale, depth);
        self.cam_to_world * c + self.center
    }
}

/// Re-centers the view on `center` and magnifies it by `factor` without
/// changing the viewing direction.
pub fn zoom_spec(spec: &VirtualCameraSpec, center: &Vec3, factor: f64) -> Result<VirtualCameraSpec, RenderError> {
    if !(factor > 1.0 && factor.is_finite()) {
        return Err(RenderError::Usage(format!("zoom factor must be > 1, got {factor}")));
    }
    let mut out = *spec;
    out.look_at = (*center).into();
    out.half_extent = spec.half_extent / factor;
    Ok(out)
}

/// Rendered color and depth from a virtual camera.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualImage {
    /// Row-major, 3 bytes per pixel; background is black.
    pub rgb: Vec<u8>,
    /// Optical-axis depth in meters; `+inf` where nothing was splatted.
    pub depth: Vec<f32>,
    pub spec: VirtualCameraSpec,
}

impl VirtualImage {
    pub fn empty(spec: VirtualCameraSpec) -> Self {
        let n = spec.resolution as usize * spec.resolution as usize;
        Self { rgb: vec![0; 3 * n], depth: vec![f32::INFINITY; n], spec }
    }

    pub fn resolution(&self) -> usize {
        self.spec.resolution as usize
    }

    pub fn covered_pixels(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }

    /// Writes `<stem>.png`, `<stem>.depth` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<[PathBuf; 3], RenderError> {
        let dir = dir.as_ref();
        let r = self.spec.resolution;
        let png = dir.join(format!("{stem}.png"));
        image::save_buffer(&png, &self.rgb, r, r, image::ExtendedColorType::Rgb8)?;
        let depth = dir.join(format!("{stem}.depth"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&depth)?);
        write_depth_raster(&mut f, r, &self.depth)?;
        f.flush()?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(&self.spec)?)?;
        Ok([png, depth, json])
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self, RenderError> {
        let dir = dir.as_ref();
        let spec: VirtualCameraSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        spec.validate()?;
        let img = image::open(dir.join(format!("{stem}.png")))?.to_rgb8();
        if img.width() != spec.resolution || img.height() != spec.resolution {
            return Err(RenderError::Format("png size disagrees with spec".into()));
        }
        let mut f = std::io::BufReader::new(std::fs::File::open(dir.join(format!("{stem}.depth")))?);
        let (res, depth) = read_depth_raster(&mut f)?;
        if res != spec.resolution {
            return Err(RenderError::Format("depth raster size disagrees with spec".into()));
        }
        Ok(Self { rgb: img.into_raw(), depth, spec })
    }
}

/// 16-byte header (`VEYD`, u32 resolution, u64 reserved) followed by
/// little-endian f32 depths. `+inf` is stored as `f32::MAX`.
pub fn write_depth_raster(w: &mut impl Write, resolution: u32, depth: &[f32]) -> std::io::Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&resolution.to_le_bytes())?;
    w.write_all(&0u64.to_le_bytes())?;
    for &d in depth {
        let d = if d == f32::INFINITY { f32::MAX } else { d };
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth_raster(r: &mut impl Read) -> Result<(u32, Vec<f32>), RenderError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != DEPTH_MAGIC {
        return Err(RenderError::Format("bad magic".into()));
    }
    let res = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let n = res as usize * res as usize;
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    let depth = bytes
        .chunks_exact(4)
        .map(|b| {
            let d = f32::from_le_bytes(b.try_into().unwrap());
            if d == f32::MAX {
                f32::INFINITY
            } else {
                d
            }
        })
        .collect();
    Ok((res, depth))
}

/// Does the splat of a point projected at coordinate `c` cover the pixel whose
/// center is at `i + 0.5`? Footprint is the half-open interval
/// `[c - side/2, c + side/2)`.
#[inline]
pub fn splat_covers(c: f64, half_side: f64, i: i64) -> bool {
    let center = i as f64 + 0.5;
    c - half_side <= center && center < c + half_side
}

/// Z-buffer ordering: nearer wins; equal depths fall back to the
/// lexicographically smaller position, then color. This is a total order, so
/// the result does not depend on point order.
#[inline]
pub fn wins_over(depth: f64, p: &Vec3, color: &[u8; 3], cur_depth: f64, cur_p: &Vec3, cur_color: &[u8; 3]) -> bool {
    if depth != cur_depth {
        return depth < cur_depth;
    }
    let ord = p.x.total_cmp(&cur_p.x).then(p.y.total_cmp(&cur_p.y)).then(p.z.total_cmp(&cur_p.z)).then(color.cmp(cur_color));
    ord.is_lt()
}

/// Is this optical-axis depth inside the renderable slab `[0, 2 * distance]`?
#[inline]
pub fn depth_in_slab(depth: f64, distance: f64) -> bool {
    depth >= 0.0 && depth <= 2.0 * distance
}

fn covered_range(c: f64, half_side: f64, res: i64) -> (i64, i64) {
    let lo = (c - half_side - 0.5).ceil() as i64;
    let hi = (c + half_side - 0.5).ceil() as i64 - 1;
    // Re-test the boundary candidates with the exact predicate.
    let mut first = None;
    let mut last = None;
    for i in (lo - 1).max(0)..=(hi + 1).min(res - 1) {
        if splat_covers(c, half_side, i) {
            first.get_or_insert(i);
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => (1, 0),
    }
}

/// Renders `cloud` into `spec` with square splats and a z-buffer.
pub fn render(cloud: &PointCloud, spec: &VirtualCameraSpec) -> VirtualImage {
    let res = spec.resolution as usize;
    let res_i = res as i64;
    let proj = spec.projector();
    let half_side = spec.splat_side() as f64 / 2.0;
    let margin = half_side + 1.0;
    let mut zbuf = vec![f64::INFINITY; res * res];
    let mut owner = vec![u32::MAX; res * res];

    for (i, p) in cloud.points.iter().enumerate() {
        let (u, v, z) = proj.project(p);
        if !depth_in_slab(z, spec.distance) {
            continue;
        }
        if !(u > -margin && u < res as f64 + margin && v > -margin && v < res as f64 + margin) {
            continue;
        }
        let (x0, x1) = covered_range(u, half_side, res_i);
        let (y0, y1) = covered_range(v, half_side, res_i);
        let color = &cloud.colors[i];
        for y in y0..=y1 {
            let row = y as usize * res;
            for x in x0..=x1 {
                let k = row + x as usize;
                let cur = owner[k];
                let take = cur == u32::MAX || {
                    let c = cur as usize;
                    wins_over(z, p, color, zbuf[k], &cloud.points[c], &cloud.colors[c])
                };
                if take {
                    zbuf[k] = z;
                    owner[k] = i as u32;
                }
            }
        }
    }

    let mut img = VirtualImage::empty(*spec);
    for k in 0..res * res {
        if owner[k] != u32::MAX {
            img.rgb[3 * k..3 * k + 3].copy_from_slice(&cloud.colors[owner[k] as usize]);
            img.depth[k] = zbuf[k] as f32;
        }
    }
    img
}
