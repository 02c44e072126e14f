//! Keyframe training samples for the coarse and fine networks.

use log::warn;

use crate::c2f::{expert_zoom, refine_label, C2fError};
use crate::codec::{ActionCodec, ActionVector};
use crate::geometry::{fuse, PointCloud};
use crate::keypoint::{DEFAULT_MIN_GAP, DEFAULT_VEL_EPS};
use crate::policy::train::TrainSample;
use crate::policy::{make_input, ModelConfig};
use crate::render::{render, VirtualCameraSpec};
use crate::world::{workspace_bounds, Demonstration};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSettings {
    pub vel_eps: f64,
    pub min_gap: usize,
    pub zoom_factor: f64,
    /// Also build zoomed samples for the fine network.
    pub with_fine: bool,
}

impl Default for SampleSettings {
    fn default() -> Self {
        Self { vel_eps: DEFAULT_VEL_EPS, min_gap: DEFAULT_MIN_GAP, zoom_factor: crate::c2f::DEFAULT_ZOOM_FACTOR, with_fine: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSample {
    pub demo: usize,
    pub obs_step: usize,
    pub key_step: usize,
    pub instruction: String,
    pub action: ActionVector,
    pub refine: bool,
    pub coarse: TrainSample,
    pub zoomed_spec: VirtualCameraSpec,
    pub fine: Option<TrainSample>,
}

/// Fused, workspace-cropped cloud of the four observations at `step`.
pub fn observation_cloud(demo: &Demonstration, step: usize) -> PointCloud {
    fuse(&demo.trajectory.steps[step].frames, &workspace_bounds()).expect("demo steps carry four frames")
}

/// One sample per keyframe pair of every demo. Keyframes whose action falls
/// outside the coarse or zoomed view are skipped with a warning.
pub fn build_samples(
    demos: &[Demonstration],
    spec: &VirtualCameraSpec,
    codec: &ActionCodec,
    cfg: &ModelConfig,
    settings: &SampleSettings,
) -> Result<Vec<KeyframeSample>, C2fError> {
    let mut out = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        let instruction = &demo.trajectory.instruction;
        for (obs, key) in demo.keyframe_pairs(settings.vel_eps, settings.min_gap) {
            let action = demo.trajectory.steps[key].action;
            let labelled = refine_label(&action, spec, settings.zoom_factor, codec)
                .and_then(|r| expert_zoom(&action, spec, settings.zoom_factor, codec).map(|(_, z)| (r, z)));
            let (refine, zoomed_spec) = match labelled {
                Ok(v) => v,
                Err(e) => {
                    warn!("demo {d} keyframe {key} skipped: {e}");
                    continue;
                }
            };
            let cloud = observation_cloud(demo, obs);
            let img = render(&cloud, spec);
            let coarse = TrainSample { input: make_input(&img, instruction, codec, cfg)?, target: codec.encode(&action, spec, refine)? };
            let fine = if settings.with_fine {
                let zimg = render(&cloud, &zoomed_spec);
                Some(TrainSample { input: make_input(&zimg, instruction, codec, cfg)?, target: codec.encode(&action, &zoomed_spec, false)? })
            } else {
                None
            };
            out.push(KeyframeSample {
                demo: d,
                obs_step: obs,
                key_step: key,
                instruction: instruction.clone(),
                action,
                refine,
                coarse,
                zoomed_spec,
                fine,
            });
        }
    }
    Ok(out)
}

pub fn coarse_set(samples: &[KeyframeSample]) -> Vec<TrainSample> {
    samples.iter().map(|s| s.coarse.clone()).collect()
}

pub fn fine_set(samples: &[KeyframeSample]) -> Vec<TrainSample> {
    samples.iter().filter_map(|s| s.fine.clone()).collect()
}
