//! Deterministic tabletop world: boxes on a table, four fixed RGB-D cameras
//! rendered by exact ray casting, and scripted expert demonstrations.

use std::fmt;
use std::str::FromStr;

use nalgebra::UnitQuaternion;
use rand::Rng;
use thiserror::Error;

use crate::codec::{quat_from_euler_xyz_deg, ActionVector};
use crate::geometry::{pose_from_angles, CameraIntrinsics, CameraModel, CameraRig, RgbdFrame, Vec3, WorkspaceBounds, MAX_SENSOR_DEPTH};
use crate::keypoint::{extract_keypoints, Step, Trajectory, DEFAULT_MIN_GAP, DEFAULT_VEL_EPS};
use crate::seed::rng_for;

pub const CAMERA_NAMES: [&str; 4] = ["front", "left_shoulder", "right_shoulder", "wrist"];
pub const CAMERA_RESOLUTION: u32 = 128;
pub const FIXED_CAMERA_FOV_DEG: f64 = 60.0;
pub const WRIST_CAMERA_FOV_DEG: f64 = 90.0;
pub const FIXED_CAMERA_DISTANCE: f64 = 1.0;
pub const WRIST_CAMERA_HEIGHT: f64 = 0.12;
/// (elev, azim) of the three static cameras.
pub const FIXED_CAMERA_ANGLES: [(f64, f64); 3] = [(15.0, 180.0), (40.0, 120.0), (40.0, -120.0)];
pub const FIXED_CAMERA_LOOK_AT: [f64; 3] = [0.0, 0.0, 0.05];

pub const BLOCK_SIZE: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.02;
/// Seconds per trajectory step; velocities are reported in m/s.
pub const STEP_DT: f64 = 0.05;
const STEP_LENGTH: f64 = 0.02;
const MIN_SEGMENT_STEPS: usize = 4;
const MIN_TRAJECTORY_LEN: usize = 20;
pub const MAX_TRAJECTORY_LEN: usize = 160;

pub const TABLE_COLOR: [u8; 3] = [150, 120, 90];
pub const BOWL_COLOR: [u8; 3] = [205, 205, 210];
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [200, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [220, 200, 40]),
    ("purple", [140, 60, 170]),
    ("orange", [230, 120, 30]),
];

pub fn workspace_bounds() -> WorkspaceBounds {
    WorkspaceBounds::new([-0.5, -0.5, -0.01], [0.5, 0.5, 0.79]).expect("constant bounds are valid")
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("unknown task `{0}` (expected reach, stack or place_in_bowl)")]
    UnknownTask(String),
    #[error("could not place objects without overlap for seed {0}")]
    Placement(u64),
    #[error("scripted demo for {task} (seed {seed}) is invalid: {reason}")]
    InvalidDemo { task: Task, seed: u64, reason: String },
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self { min: center - half, max: center + half }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn translated(&self, d: Vec3) -> Self {
        Self { min: self.min + d, max: self.max + d }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    /// Entry distance and the axis of the entered face, or `None` for a miss.
    /// Rays starting inside the box do not hit it.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize, bool)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        let mut from_min_side = false;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let t1 = (self.min[i] - origin[i]) * inv;
            let t2 = (self.max[i] - origin[i]) * inv;
            let (lo, hi, lo_is_min) = if t1 <= t2 { (t1, t2, true) } else { (t2, t1, false) };
            if lo > t_near {
                t_near = lo;
                axis = i;
                from_min_side = lo_is_min;
            }
            t_far = t_far.min(hi);
        }
        if t_near <= t_far && t_near > 0.0 {
            Some((t_near, axis, from_min_side))
        } else {
            None
        }
    }

    /// Unsigned distance from `p` to the box surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let mut outside = Vec3::zeros();
        let mut inside = f64::INFINITY;
        let mut is_inside = true;
        for i in 0..3 {
            if p[i] < self.min[i] {
                outside[i] = self.min[i] - p[i];
                is_inside = false;
            } else if p[i] > self.max[i] {
                outside[i] = p[i] - self.max[i];
                is_inside = false;
            } else {
                inside = inside.min(p[i] - self.min[i]).min(self.max[i] - p[i]);
            }
        }
        if is_inside {
            inside
        } else {
            outside.norm()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub color: [u8; 3],
    pub aabb: Aabb,
}

/// Kinematic gripper: the tool-center point plus a visible hand box above it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gripper {
    pub tcp: Vec3,
    pub open: bool,
}

impl Gripper {
    pub const HAND_HALF: [f64; 3] = [0.035, 0.012, 0.015];
    pub const HAND_OFFSET: f64 = 0.05;

    pub fn hand(&self) -> SceneObject {
        let color = if self.open { [70, 70, 70] } else { [25, 25, 25] };
        SceneObject {
            id: "gripper".into(),
            color,
            aabb: Aabb::from_center(self.tcp + Vec3::new(0.0, 0.0, Self::HAND_OFFSET), Vec3::from(Self::HAND_HALF)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Static and movable boxes; the table, when present, is the first entry.
    pub objects: Vec<SceneObject>,
    pub gripper: Option<Gripper>,
    pub seed: u64,
}

impl Scene {
    /// Scene with a table under `objects`.
    pub fn new(objects: Vec<SceneObject>, gripper: Option<Gripper>, seed: u64) -> Self {
        let table =
            SceneObject { id: "table".into(), color: TABLE_COLOR, aabb: Aabb { min: Vec3::new(-0.6, -0.6, -0.05), max: Vec3::new(0.6, 0.6, 0.0) } };
        Self { objects: std::iter::once(table).chain(objects).collect(), gripper, seed }
    }

    pub fn empty() -> Self {
        Self { objects: vec![], gripper: None, seed: 0 }
    }

    pub fn object(&self, id: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        let fixed_k = CameraIntrinsics::from_fov(FIXED_CAMERA_FOV_DEG, CAMERA_RESOLUTION).unwrap();
        let mut cams: Vec<CameraModel> = FIXED_CAMERA_ANGLES
            .iter()
            .zip(CAMERA_NAMES)
            .map(|(&(elev, azim), name)| CameraModel {
                name: name.to_string(),
                intrinsics: fixed_k,
                extrinsics: pose_from_angles(elev, azim, FIXED_CAMERA_DISTANCE, Vec3::from(FIXED_CAMERA_LOOK_AT)).unwrap(),
            })
            .collect();
        let tcp = self.gripper.map(|g| g.tcp).unwrap_or(Vec3::new(0.0, 0.0, 0.4));
        cams.push(CameraModel {
            name: CAMERA_NAMES[3].to_string(),
            intrinsics: CameraIntrinsics::from_fov(WRIST_CAMERA_FOV_DEG, CAMERA_RESOLUTION).unwrap(),
            extrinsics: pose_from_angles(90.0, 0.0, WRIST_CAMERA_HEIGHT, tcp).unwrap(),
        });
        cams
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig { cameras: self.cameras(), workspace_bounds: workspace_bounds() }
    }

    pub fn render_all(&self) -> Vec<RgbdFrame> {
        self.cameras().iter().map(|c| raycast_rgbd(self, c)).collect()
    }

    /// Distance from `p` to the nearest surface of any box in the scene
    /// (including the gripper hand).
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let hand = self.gripper.map(|g| g.hand());
        self.objects.iter().chain(hand.iter()).map(|o| o.aabb.surface_distance(p)).fold(f64::INFINITY, f64::min)
    }
}

fn shade(color: [u8; 3], axis: usize, from_min_side: bool) -> [u8; 3] {
    let f = match (axis, from_min_side) {
        (2, false) => 1.0,
        (2, true) => 0.45,
        (0, _) => 0.8,
        _ => 0.65,
    };
    color.map(|c| (c as f64 * f).round() as u8)
}

/// Exact ray-cast RGB-D image of `scene` from `camera`. Pixel `(u, v)` samples
/// the ray through integer pixel coordinates, matching
/// [`crate::geometry::backproject`]. Misses have depth 0.
pub fn raycast_rgbd(scene: &Scene, camera: &CameraModel) -> RgbdFrame {
    let k = &camera.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let origin = camera.extrinsics.translation;
    let mut boxes = scene.objects.clone();
    // The wrist camera does not see the hand it is mounted on.
    if camera.name != CAMERA_NAMES[3] {
        if let Some(g) = scene.gripper {
            boxes.push(g.hand());
        }
    }
    let mut rgb = vec![0u8; 3 * w * h];
    let mut depth = vec![0f32; w * h];
    for v in 0..h {
        for u in 0..w {
            // Camera-frame direction with unit z, so the hit distance along
            // this ray equals the optical-axis depth.
            let dir_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = camera.extrinsics.apply_vector(&dir_cam);
            let mut best: Option<(f64, [u8; 3])> = None;
            for b in &boxes {
                if let Some((t, axis, side)) = b.aabb.intersect(&origin, &dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, shade(b.color, axis, side)));
                    }
                }
            }
            if let Some((t, color)) = best {
                let d = t as f32;
                if d > 0.0 && d <= MAX_SENSOR_DEPTH {
                    let i = v * w + u;
                    depth[i] = d;
                    rgb[3 * i..3 * i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    RgbdFrame::new(camera.name.clone(), rgb, depth, *k, camera.extrinsics).expect("ray-cast frame is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Reach,
    Stack,
    PlaceInBowl,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Reach, Task::Stack, Task::PlaceInBowl];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::Stack => "stack",
            Task::PlaceInBowl => "place_in_bowl",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = WorldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| WorldError::UnknownTask(s.to_string()))
    }
}

/// A scripted expert demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub trajectory: Trajectory,
    pub task_name: String,
    pub variation: String,
    pub seed: u64,
}

impl Demonstration {
    /// `(observation step, target keyframe)` pairs: each keyframe is predicted
    /// from the observation at the previous keyframe (or the first step).
    pub fn keyframe_pairs(&self, vel_eps: f64, min_gap: usize) -> Vec<(usize, usize)> {
        let kps = extract_keypoints(&self.trajectory, vel_eps, min_gap).expect("demos are valid trajectories");
        let mut prev = 0;
        kps.into_iter()
            .filter(|&k| k != 0)
            .map(|k| {
                let pair = (prev, k);
                prev = k;
                pair
            })
            .collect()
    }
}

/// Gripper pointing straight down.
pub fn grasp_rotation() -> UnitQuaternion<f64> {
    quat_from_euler_xyz_deg([180.0, 0.0, 0.0])
}

struct Waypoint {
    position: Vec3,
    open: bool,
    collision_allowed: bool,
}

fn block(id: &str, color: [u8; 3], center_xy: (f64, f64)) -> SceneObject {
    let half = BLOCK_SIZE / 2.0;
    SceneObject { id: id.into(), color, aabb: Aabb::from_center(Vec3::new(center_xy.0, center_xy.1, half), Vec3::repeat(half)) }
}

pub const BOWL_INNER_HALF: f64 = 0.06;
const BOWL_WALL: f64 = 0.01;
const BOWL_WALL_HEIGHT: f64 = 0.04;
const BOWL_BASE: f64 = 0.01;

fn bowl(center: (f64, f64)) -> Vec<SceneObject> {
    let c = Vec3::new(center.0, center.1, 0.0);
    let outer = BOWL_INNER_HALF + BOWL_WALL;
    let mut parts = vec![SceneObject {
        id: "bowl_base".into(),
        color: BOWL_COLOR,
        aabb: Aabb { min: c + Vec3::new(-outer, -outer, 0.0), max: c + Vec3::new(outer, outer, BOWL_BASE) },
    }];
    let walls = [
        ("bowl_wall_px", Vec3::new(BOWL_INNER_HALF, -outer, BOWL_BASE), Vec3::new(outer, outer, BOWL_BASE + BOWL_WALL_HEIGHT)),
        ("bowl_wall_nx", Vec3::new(-outer, -outer, BOWL_BASE), Vec3::new(-BOWL_INNER_HALF, outer, BOWL_BASE + BOWL_WALL_HEIGHT)),
        ("bowl_wall_py", Vec3::new(-BOWL_INNER_HALF, BOWL_INNER_HALF, BOWL_BASE), Vec3::new(BOWL_INNER_HALF, outer, BOWL_BASE + BOWL_WALL_HEIGHT)),
        ("bowl_wall_ny", Vec3::new(-BOWL_INNER_HALF, -outer, BOWL_BASE), Vec3::new(BOWL_INNER_HALF, -BOWL_INNER_HALF, BOWL_BASE + BOWL_WALL_HEIGHT)),
    ];
    for (id, lo, hi) in walls {
        parts.push(SceneObject { id: id.into(), color: BOWL_COLOR, aabb: Aabb { min: c + lo, max: c + hi } });
    }
    parts
}

/// Samples `n` table positions at least `min_sep` apart (Chebyshev distance,
/// so footprints of that size cannot overlap).
fn sample_positions(rng: &mut impl Rng, n: usize, min_sep: f64, seed: u64) -> Result<Vec<(f64, f64)>, WorldError> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for _ in 0..1000 {
        if out.len() == n {
            break;
        }
        let p = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
        if out.iter().all(|q| (p.0 - q.0).abs().max((p.1 - q.1).abs()) >= min_sep) {
            out.push(p);
        }
    }
    if out.len() == n {
        Ok(out)
    } else {
        Err(WorldError::Placement(seed))
    }
}

fn pick_colors(rng: &mut impl Rng, n: usize) -> Vec<(&'static str, [u8; 3])> {
    let mut idx: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..n {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| PALETTE[i]).collect()
}

/// Builds the initial scene and expert waypoints for `task`.
fn script(task: Task, seed: u64) -> Result<(Scene, Vec<Waypoint>, String, String), WorldError> {
    let mut rng = rng_for(seed, &format!("world/{}", task.name()));
    let start = Vec3::new(rng.gen_range(-0.42..-0.34), rng.gen_range(-0.12..0.12), rng.gen_range(0.45..0.55));
    let gripper = Some(Gripper { tcp: start, open: true });
    let half = BLOCK_SIZE / 2.0;
    let wp = |position: Vec3, open: bool, collision_allowed: bool| Waypoint { position, open, collision_allowed };

    match task {
        Task::Reach => {
            let [(x, y)] = sample_positions(&mut rng, 1, 0.0, seed)?[..] else { unreachable!() };
            let (cname, color) = pick_colors(&mut rng, 1)[0];
            let target = Vec3::new(x, y, half);
            let scene = Scene::new(vec![block("target", color, (x, y))], gripper, seed);
            let waypoints = vec![wp(target + Vec3::new(0.0, 0.0, 0.15), true, false), wp(target, true, true)];
            Ok((scene, waypoints, format!("reach the {cname} block"), cname.to_string()))
        }
        Task::Stack => {
            let pos = sample_positions(&mut rng, 2, 0.12, seed)?;
            let colors = pick_colors(&mut rng, 2);
            let (top, base) = (Vec3::new(pos[0].0, pos[0].1, half), Vec3::new(pos[1].0, pos[1].1, half));
            let scene = Scene::new(vec![block("top", colors[0].1, pos[0]), block("base", colors[1].1, pos[1])], gripper, seed);
            let place = base + Vec3::new(0.0, 0.0, BLOCK_SIZE);
            let waypoints = vec![
                wp(top + Vec3::new(0.0, 0.0, 0.12), true, false),
                wp(top, false, true),
                wp(top + Vec3::new(0.0, 0.0, 0.2), false, false),
                wp(place + Vec3::new(0.0, 0.0, 0.12), false, false),
                wp(place, true, true),
                wp(place + Vec3::new(0.0, 0.0, 0.15), true, false),
            ];
            let instruction = format!("stack the {} block on the {} block", colors[0].0, colors[1].0);
            Ok((scene, waypoints, instruction, format!("{}_on_{}", colors[0].0, colors[1].0)))
        }
        Task::PlaceInBowl => {
            let pos = sample_positions(&mut rng, 2, 0.2, seed)?;
            let (cname, color) = pick_colors(&mut rng, 1)[0];
            let item = Vec3::new(pos[0].0, pos[0].1, half);
            let mut objects = vec![block("item", color, pos[0])];
            objects.extend(bowl(pos[1]));
            let scene = Scene::new(objects, gripper, seed);
            let place = Vec3::new(pos[1].0, pos[1].1, BOWL_BASE + half);
            let waypoints = vec![
                wp(item + Vec3::new(0.0, 0.0, 0.12), true, false),
                wp(item, false, true),
                wp(item + Vec3::new(0.0, 0.0, 0.2), false, false),
                wp(place + Vec3::new(0.0, 0.0, 0.15), false, false),
                wp(place, true, true),
                wp(place + Vec3::new(0.0, 0.0, 0.15), true, false),
            ];
            Ok((scene, waypoints, format!("put the {cname} block in the bowl"), cname.to_string()))
        }
    }
}

/// Advances the kinematic gripper to `tcp`. Closing attaches the object whose
/// center lies within [`GRASP_RADIUS`]; a held object follows the gripper
/// through the step on which it is released.
fn step_gripper(scene: &mut Scene, held: &mut Option<(usize, Vec3)>, tcp: Vec3, open: bool) {
    let was_open = scene.gripper.is_none_or(|g| g.open);
    if was_open && !open {
        *held = scene.objects.iter().position(|o| (o.aabb.center() - tcp).norm() <= GRASP_RADIUS).map(|i| (i, scene.objects[i].aabb.center() - tcp));
    }
    scene.gripper = Some(Gripper { tcp, open });
    if let Some((i, offset)) = *held {
        let c = scene.objects[i].aabb.center();
        scene.objects[i].aabb = scene.objects[i].aabb.translated(tcp + offset - c);
    }
    if open {
        *held = None;
    }
}

/// Per-segment step counts; the first segment absorbs any shortfall so the
/// trajectory reaches the minimum length.
fn segment_steps(points: &[Vec3]) -> Vec<usize> {
    let mut steps: Vec<usize> = points.windows(2).map(|w| (((w[1] - w[0]).norm() / STEP_LENGTH).ceil() as usize).max(MIN_SEGMENT_STEPS)).collect();
    let total: usize = steps.iter().sum::<usize>() + 1;
    if total < MIN_TRAJECTORY_LEN {
        steps[0] += MIN_TRAJECTORY_LEN - total;
    }
    steps
}

/// Runs the scripted expert for `task` with per-seed pose randomization.
///
/// The first segment starts in motion and eases out; later segments use a
/// smoothstep profile, so velocity is exactly zero at every waypoint and
/// strictly positive in between.
pub fn make_demo(task: Task, seed: u64) -> Result<Demonstration, WorldError> {
    let (mut scene, waypoints, instruction, variation) = script(task, seed)?;
    let start = scene.gripper.unwrap().tcp;
    let mut points = vec![start];
    points.extend(waypoints.iter().map(|w| w.position));
    let seg_steps = segment_steps(&points);
    let rotation = grasp_rotation();

    let mut held: Option<(usize, Vec3)> = None;
    let mut steps: Vec<Step> = Vec::new();
    let mut push_step = |scene: &mut Scene, tcp: Vec3, open: bool, collision: bool, velocity: f64, held: &mut Option<(usize, Vec3)>| {
        step_gripper(scene, held, tcp, open);
        steps.push(Step {
            frames: scene.render_all(),
            action: ActionVector::new(tcp, rotation, open, collision),
            joint_velocity_norm: velocity,
            gripper_open: open,
        });
    };

    let v_scale = 1.0 / STEP_DT;
    let first_len = (points[1] - points[0]).norm();
    push_step(&mut scene, start, true, false, first_len * 2.0 / seg_steps[0] as f64 * v_scale, &mut held);
    for (seg, w) in waypoints.iter().enumerate() {
        let (a, b) = (points[seg], points[seg + 1]);
        let n = seg_steps[seg];
        let len = (b - a).norm();
        let prev_open = if seg == 0 { true } else { waypoints[seg - 1].open };
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let (s, ds) = if seg == 0 { (2.0 * t - t * t, 2.0 * (1.0 - t)) } else { (3.0 * t * t - 2.0 * t.powi(3), 6.0 * t * (1.0 - t)) };
            let tcp = if k == n { b } else { a + (b - a) * s };
            let velocity = if k == n { 0.0 } else { len * ds / n as f64 * v_scale };
            let open = if k == n { w.open } else { prev_open };
            push_step(&mut scene, tcp, open, w.collision_allowed, velocity, &mut held);
        }
    }

    let demo = Demonstration {
        trajectory: Trajectory::new(steps, instruction).map_err(|e| WorldError::InvalidDemo { task, seed, reason: e.to_string() })?,
        task_name: task.name().to_string(),
        variation,
        seed,
    };
    let n = demo.trajectory.len();
    if !(MIN_TRAJECTORY_LEN..=MAX_TRAJECTORY_LEN).contains(&n) {
        return Err(WorldError::InvalidDemo { task, seed, reason: format!("length {n}") });
    }
    if !task_success(task, &scene) {
        return Err(WorldError::InvalidDemo { task, seed, reason: "success predicate failed".into() });
    }
    Ok(demo)
}

/// Final-scene success predicate for each task. `scene` is the state after
/// the last step of an episode.
pub fn task_success(task: Task, scene: &Scene) -> bool {
    let resting_on = |top: &SceneObject, support_z: f64| (top.aabb.min.z - support_z).abs() < 1e-6;
    match task {
        Task::Reach => match (scene.object("target"), scene.gripper) {
            (Some(t), Some(g)) => (t.aabb.center() - g.tcp).norm() < 0.01,
            _ => false,
        },
        Task::Stack => match (scene.object("top"), scene.object("base")) {
            (Some(top), Some(base)) => {
                let d = top.aabb.center() - base.aabb.center();
                (d.x * d.x + d.y * d.y).sqrt() <= 0.01 && resting_on(top, base.aabb.max.z)
            }
            _ => false,
        },
        Task::PlaceInBowl => match (scene.object("item"), scene.object("bowl_base")) {
            (Some(item), Some(base)) => {
                let c = item.aabb.center();
                let bc = base.aabb.center();
                let slack = BOWL_INNER_HALF - BLOCK_SIZE / 2.0;
                (c.x - bc.x).abs() <= slack && (c.y - bc.y).abs() <= slack && resting_on(item, base.aabb.max.z)
            }
            _ => false,
        },
    }
}

/// Replays a demonstration's gripper commands on its initial scene and
/// returns the final scene state.
pub fn replay_final_scene(task: Task, seed: u64, actions: &[ActionVector]) -> Result<Scene, WorldError> {
    let (mut scene, ..) = script(task, seed)?;
    let mut held: Option<(usize, Vec3)> = None;
    for a in actions {
        step_gripper(&mut scene, &mut held, a.position, a.gripper_open);
    }
    Ok(scene)
}

/// Default keyframe settings used by the synthetic tasks.
pub fn default_keyframes(demo: &Demonstration) -> Vec<usize> {
    extract_keypoints(&demo.trajectory, DEFAULT_VEL_EPS, DEFAULT_MIN_GAP).expect("demos are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fuse, CameraIntrinsics, RigidTransform};

    #[test]
    fn empty_scene_is_background() {
        let scene = Scene::empty();
        let cam =
            CameraModel { name: "front".into(), intrinsics: CameraIntrinsics::from_fov(60.0, 32).unwrap(), extrinsics: RigidTransform::identity() };
        let f = raycast_rgbd(&scene, &cam);
        assert!(f.depth.iter().all(|d| *d == 0.0));
        assert!(f.rgb.iter().all(|c| *c == 0));
    }

    #[test]
    fn unit_box_front_face_depth() {
        let mut scene = Scene::empty();
        scene.objects.push(SceneObject {
            id: "unit".into(),
            color: [255, 0, 0],
            aabb: Aabb::from_center(Vec3::new(0.0, 0.0, 1.0), Vec3::repeat(0.5)),
        });
        let cam = CameraModel {
            name: "front".into(),
            intrinsics: CameraIntrinsics::new(50.0, 50.0, 16.0, 16.0, 32, 32).unwrap(),
            extrinsics: RigidTransform::identity(),
        };
        let f = raycast_rgbd(&scene, &cam);
        assert_eq!(f.depth[16 * 32 + 16], 0.5);
    }

    #[test]
    fn fused_cloud_lies_on_surfaces() {
        let demo_scene = script(Task::Stack, 3).unwrap().0;
        let frames = demo_scene.render_all();
        assert_eq!(frames.len(), 4);
        let cloud = fuse(&frames, &workspace_bounds()).unwrap();
        assert!(cloud.len() > 1000);
        for p in &cloud.points {
            assert!(demo_scene.surface_distance(p) < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = script(Task::PlaceInBowl, 9).unwrap().0;
        assert_eq!(scene.render_all(), scene.render_all());
    }

    #[test]
    fn unknown_task() {
        assert!(matches!("pour".parse::<Task>(), Err(WorldError::UnknownTask(_))));
        assert_eq!("place_in_bowl".parse::<Task>().unwrap(), Task::PlaceInBowl);
    }

    #[test]
    fn reach_ends_on_target() {
        let demo = make_demo(Task::Reach, 1).unwrap();
        let scene = script(Task::Reach, 1).unwrap().0;
        let last = demo.trajectory.steps.last().unwrap();
        assert_eq!(last.action.position, scene.object("target").unwrap().aabb.center());
    }

    #[test]
    fn demos_have_valid_lengths_and_keyframes() {
        for task in Task::ALL {
            for seed in 0..3 {
                let demo = make_demo(task, seed).unwrap();
                let n = demo.trajectory.len();
                assert!((20..=160).contains(&n), "{task} len {n}");
                let kps = default_keyframes(&demo);
                assert!((2..=12).contains(&kps.len()), "{task} {kps:?}");
                assert!(demo.trajectory.steps.iter().all(|s| s.frames.len() == 4));
            }
        }
    }

    #[test]
    fn seeds_share_structure_but_not_poses() {
        for task in Task::ALL {
            let a = make_demo(task, 10).unwrap();
            let b = make_demo(task, 11).unwrap();
            let (ka, kb) = (default_keyframes(&a), default_keyframes(&b));
            assert_eq!(ka.len(), kb.len());
            let gripper = |d: &Demonstration, k: &[usize]| k.iter().map(|&i| d.trajectory.steps[i].gripper_open).collect::<Vec<_>>();
            assert_eq!(gripper(&a, &ka), gripper(&b, &kb));
            assert_ne!(a.trajectory.steps[ka[0]].action.position, b.trajectory.steps[kb[0]].action.position);
        }
    }

    #[test]
    fn replay_reaches_success() {
        for task in Task::ALL {
            let demo = make_demo(task, 4).unwrap();
            let actions: Vec<_> = demo.trajectory.steps.iter().map(|s| s.action).collect();
            let end = replay_final_scene(task, 4, &actions).unwrap();
            assert!(task_success(task, &end));
            // Replaying only the keyframes is enough for the kinematic gripper.
            let kf: Vec<_> = default_keyframes(&demo).iter().map(|&k| demo.trajectory.steps[k].action).collect();
            assert!(task_success(task, &replay_final_scene(task, 4, &kf).unwrap()));
        }
    }

    #[test]
    fn box_surface_distance() {
        let b = Aabb { min: Vec3::zeros(), max: Vec3::repeat(1.0) };
        assert_eq!(b.surface_distance(&Vec3::new(0.5, 0.5, 1.0)), 0.0);
        assert!((b.surface_distance(&Vec3::new(0.5, 0.5, 0.9)) - 0.1).abs() < 1e-12);
        assert!((b.surface_distance(&Vec3::new(2.0, 0.5, 0.5)) - 1.0).abs() < 1e-12);
    }
}
