//! Keyframe evaluation of a coarse/fine model pair.
//!
//! The report (`EvalReport`, written as JSON by the CLI) has these fields:
//!
//! | field | meaning |
//! |---|---|
//! | `keyframes` | number of evaluated keyframes |
//! | `refine_policy` | `learned`, `force_on` or `force_off` |
//! | `quantization_bound_m` | codec position bound on the global view |
//! | `fine_quantization_bound_m` | codec position bound on a zoomed view |
//! | `position_error_m` | mean / median / max Euclidean error |
//! | `rotation_error_deg` | mean / median / max geodesic error |
//! | `within_bound` | fraction of keyframes whose error is within the bound of the view they were decoded on |
//! | `refine` | indicator firing counts against the bootstrapped labels |
//! | `keyframe_success` | fraction meeting the codec-level success predicate |
//! | `task_success` | replayed episodes whose final scene satisfies the task predicate |
//! | `forward_passes`, `renders` | totals over all keyframes |
//! | `mean_latency_ms` | mean wall time per inference |
//! | `per_keyframe` | one `KeyframeResult` per keyframe |
//!
//! A keyframe is a codec-level success when its position error is within the
//! quantization bound of the view it was decoded on, every Euler angle is
//! within half a rotation bin and both bits match.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::c2f::{infer, refine_label, C2fError, InferenceTrace, RefinePolicy};
use crate::codec::{rotation_distance_deg, wrap_deg, ActionCodec, ActionVector, ROT_BIN_DEG};
use crate::geometry::{CameraModel, CameraRig};
use crate::policy::Params;
use crate::render::VirtualCameraSpec;
use crate::samples::observation_cloud;
use crate::viewpoint::client::ChatClient;
use crate::viewpoint::{select_view, Transcript, ViewSettings};
use crate::world::{replay_final_scene, task_success, workspace_bounds, Demonstration, Task};

/// Supplies the global view used for each evaluated keyframe.
pub trait ViewSource {
    /// `keyframe` counts the keyframes of `demo` from 0.
    fn view(&mut self, demo: &Demonstration, obs_step: usize, keyframe: usize) -> Result<VirtualCameraSpec, C2fError>;
}

pub struct FixedView(pub VirtualCameraSpec);

impl ViewSource for FixedView {
    fn view(&mut self, _: &Demonstration, _: usize, _: usize) -> Result<VirtualCameraSpec, C2fError> {
        Ok(self.0)
    }
}

/// Re-runs view selection on the current observation every `every_k`
/// keyframes of each demo and keeps the last selected view in between.
pub struct RequeryingView<'a> {
    pub client: &'a mut dyn ChatClient,
    pub settings: ViewSettings,
    pub every_k: usize,
    pub current: Option<VirtualCameraSpec>,
    pub transcripts: Vec<Transcript>,
}

impl<'a> RequeryingView<'a> {
    pub fn new(client: &'a mut dyn ChatClient, settings: ViewSettings, every_k: usize) -> Self {
        Self { client, settings, every_k: every_k.max(1), current: None, transcripts: Vec::new() }
    }
}

impl ViewSource for RequeryingView<'_> {
    fn view(&mut self, demo: &Demonstration, obs_step: usize, keyframe: usize) -> Result<VirtualCameraSpec, C2fError> {
        if let (Some(spec), false) = (self.current, keyframe.is_multiple_of(self.every_k)) {
            return Ok(spec);
        }
        let frames = &demo.trajectory.steps[obs_step].frames;
        let rig = CameraRig {
            cameras: frames.iter().map(|f| CameraModel { name: f.name.clone(), intrinsics: f.intrinsics, extrinsics: f.extrinsics }).collect(),
            workspace_bounds: workspace_bounds(),
        };
        let (spec, transcript) = select_view(self.client, &demo.trajectory.instruction, &rig, frames, &self.settings)?;
        self.transcripts.push(transcript);
        self.current = Some(spec);
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub vel_eps: f64,
    pub min_gap: usize,
    pub zoom_factor: f64,
    pub refine_policy: RefinePolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let s = crate::samples::SampleSettings::default();
        Self { vel_eps: s.vel_eps, min_gap: s.min_gap, zoom_factor: s.zoom_factor, refine_policy: RefinePolicy::Learned }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KeyframeResult {
    pub demo: usize,
    pub seed: u64,
    pub key_step: usize,
    pub expert: ActionVector,
    pub refine_label: Option<bool>,
    pub position_error_m: f64,
    pub rotation_error_deg: f64,
    pub bound_m: f64,
    pub within_bound: bool,
    pub success: bool,
    pub trace: InferenceTrace,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self { mean: v.iter().sum::<f64>() / n as f64, median, max: v[n - 1] }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RefineStats {
    pub fired: usize,
    pub labelled_positive: usize,
    pub fired_on_positive: usize,
    pub fired_on_negative: usize,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TaskSuccess {
    pub episodes: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub keyframes: usize,
    pub refine_policy: RefinePolicy,
    pub quantization_bound_m: f64,
    pub fine_quantization_bound_m: f64,
    pub position_error_m: Summary,
    pub rotation_error_deg: Summary,
    pub within_bound: f64,
    pub refine: RefineStats,
    pub keyframe_success: f64,
    pub task_success: TaskSuccess,
    pub forward_passes: usize,
    pub renders: usize,
    pub mean_latency_ms: f64,
    pub per_keyframe: Vec<KeyframeResult>,
}

fn bits_and_angles_match(pred: &ActionVector, expert: &ActionVector) -> bool {
    let (p, e) = (pred.euler_deg(), expert.euler_deg());
    pred.gripper_open == expert.gripper_open
        && pred.collision_allowed == expert.collision_allowed
        && (0..3).all(|i| wrap_deg(p[i] - e[i]).abs() <= ROT_BIN_DEG / 2.0 + 1e-9)
}

/// Runs the controller on every keyframe pair of `demos` from a fixed view
/// and replays each demo's predicted keyframes to score task success.
pub fn evaluate(
    coarse: &Params,
    fine: &Params,
    demos: &[Demonstration],
    spec: &VirtualCameraSpec,
    codec: &ActionCodec,
    settings: &EvalSettings,
) -> Result<EvalReport, C2fError> {
    evaluate_with(coarse, fine, demos, &mut FixedView(*spec), spec, codec, settings)
}

/// [`evaluate`] with per-keyframe views from `views`. Report-level bounds
/// refer to `reference`.
pub fn evaluate_with(
    coarse: &Params,
    fine: &Params,
    demos: &[Demonstration],
    views: &mut dyn ViewSource,
    reference: &VirtualCameraSpec,
    codec: &ActionCodec,
    settings: &EvalSettings,
) -> Result<EvalReport, C2fError> {
    let mut per_keyframe = Vec::new();
    let mut episodes: BTreeMap<usize, Vec<ActionVector>> = BTreeMap::new();
    for (d, demo) in demos.iter().enumerate() {
        let instruction = &demo.trajectory.instruction;
        for (i, (obs, key)) in demo.keyframe_pairs(settings.vel_eps, settings.min_gap).into_iter().enumerate() {
            let expert = demo.trajectory.steps[key].action;
            let spec = &views.view(demo, obs, i)?;
            let cloud = observation_cloud(demo, obs);
            let trace = infer(coarse, fine, &cloud, spec, instruction, settings.zoom_factor, codec, settings.refine_policy)?;
            let pred = *trace.action();
            let bound = codec.quantization_bound(trace.zoomed_spec.as_ref().unwrap_or(spec));
            let position_error_m = (pred.position - expert.position).norm();
            let within_bound = position_error_m <= bound + 1e-12;
            episodes.entry(d).or_default().push(pred);
            per_keyframe.push(KeyframeResult {
                demo: d,
                seed: demo.seed,
                key_step: key,
                expert,
                refine_label: refine_label(&expert, spec, settings.zoom_factor, codec).ok(),
                position_error_m,
                rotation_error_deg: rotation_distance_deg(&pred.rotation, &expert.rotation),
                bound_m: bound,
                within_bound,
                success: within_bound && bits_and_angles_match(&pred, &expert),
                trace,
            });
        }
    }

    let n = per_keyframe.len();
    let frac = |f: &dyn Fn(&KeyframeResult) -> bool| if n == 0 { 0.0 } else { per_keyframe.iter().filter(|r| f(r)).count() as f64 / n as f64 };
    let mut refine = RefineStats::default();
    for r in &per_keyframe {
        let positive = r.refine_label == Some(true);
        refine.fired += r.trace.refined as usize;
        refine.labelled_positive += positive as usize;
        refine.fired_on_positive += (r.trace.refined && positive) as usize;
        refine.fired_on_negative += (r.trace.refined && r.refine_label == Some(false)) as usize;
    }
    let mut task = TaskSuccess::default();
    for (d, actions) in &episodes {
        let demo = &demos[*d];
        let Ok(kind) = demo.task_name.parse::<Task>() else { continue };
        let scene = replay_final_scene(kind, demo.seed, actions).map_err(|e| C2fError::Eval(e.to_string()))?;
        task.episodes += 1;
        task.successes += task_success(kind, &scene) as usize;
    }
    task.rate = if task.episodes == 0 { 0.0 } else { task.successes as f64 / task.episodes as f64 };
    let spec = reference;
    let fine_spec = crate::render::zoom_spec(spec, &spec.look_at(), settings.zoom_factor)?;

    Ok(EvalReport {
        keyframes: n,
        refine_policy: settings.refine_policy,
        quantization_bound_m: codec.quantization_bound(spec),
        fine_quantization_bound_m: codec.quantization_bound(&fine_spec),
        position_error_m: Summary::of(&per_keyframe.iter().map(|r| r.position_error_m).collect::<Vec<_>>()),
        rotation_error_deg: Summary::of(&per_keyframe.iter().map(|r| r.rotation_error_deg).collect::<Vec<_>>()),
        within_bound: frac(&|r| r.within_bound),
        refine,
        keyframe_success: frac(&|r| r.success),
        task_success: task,
        forward_passes: per_keyframe.iter().map(|r| r.trace.forward_passes).sum(),
        renders: per_keyframe.iter().map(|r| r.trace.renders).sum(),
        mean_latency_ms: if n == 0 {
            0.0
        } else {
            per_keyframe.iter().map(|r| r.trace.coarse_ms + r.trace.fine_ms.unwrap_or(0.0)).sum::<f64>() / n as f64
        },
        per_keyframe,
    })
}
