//! Dynamic coarse-to-fine inference and refine-label bootstrapping.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{label_refine, ActionCodec, ActionVector, CodecError, PolicyOutputs};
use crate::geometry::{PointCloud, Vec3};
use crate::policy::{forward, make_input, Params, PolicyError};
use crate::render::{render, zoom_spec, RenderError, VirtualCameraSpec};

pub const DEFAULT_ZOOM_FACTOR: f64 = 4.0;

#[derive(Debug, Error)]
pub enum C2fError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    View(#[from] crate::viewpoint::ViewpointError),
    #[error("eval: {0}")]
    Eval(String),
}

/// How the refine indicator is resolved at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinePolicy {
    Learned,
    ForceOn,
    ForceOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub coarse_action: ActionVector,
    pub refined: bool,
    pub fine_action: Option<ActionVector>,
    pub global_spec: VirtualCameraSpec,
    pub zoomed_spec: Option<VirtualCameraSpec>,
    pub coarse_ms: f64,
    pub fine_ms: Option<f64>,
    pub forward_passes: usize,
    pub renders: usize,
}

impl InferenceTrace {
    /// The action the controller executes.
    pub fn action(&self) -> &ActionVector {
        self.fine_action.as_ref().unwrap_or(&self.coarse_action)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Renders the global view, runs the coarse model and, when the refine
/// indicator fires (or `policy` forces it), zooms in on the coarse position
/// and runs the fine model. The fine action is decoded inside the zoomed view
/// volume, so it never leaves the zoom window.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    coarse: &Params,
    fine: &Params,
    cloud: &PointCloud,
    global_spec: &VirtualCameraSpec,
    instruction: &str,
    zoom_factor: f64,
    codec: &ActionCodec,
    policy: RefinePolicy,
) -> Result<InferenceTrace, C2fError> {
    if !(zoom_factor > 1.0) {
        return Err(RenderError::Usage(format!("zoom factor must be > 1, got {zoom_factor}")).into());
    }
    let t0 = Instant::now();
    let img = render(cloud, global_spec);
    let input = make_input(&img, instruction, codec, &coarse.cfg)?;
    let (out, _) = forward(coarse, &input);
    let coarse_action = codec.decode(&out, global_spec);
    let coarse_ms = ms(t0);
    let refined = match policy {
        RefinePolicy::Learned => out.refine_fires(),
        RefinePolicy::ForceOn => true,
        RefinePolicy::ForceOff => false,
    };
    let mut trace = InferenceTrace {
        coarse_action,
        refined,
        fine_action: None,
        global_spec: *global_spec,
        zoomed_spec: None,
        coarse_ms,
        fine_ms: None,
        forward_passes: 1,
        renders: 1,
    };
    if refined {
        let t1 = Instant::now();
        let zoomed = zoom_spec(global_spec, &coarse_action.position, zoom_factor)?;
        let img = render(cloud, &zoomed);
        let input = make_input(&img, instruction, codec, &fine.cfg)?;
        let (out, _) = forward(fine, &input);
        trace.fine_action = Some(codec.decode(&out, &zoomed));
        trace.zoomed_spec = Some(zoomed);
        trace.fine_ms = Some(ms(t1));
        trace.forward_passes = 2;
        trace.renders = 2;
    }
    Ok(trace)
}

/// Encodes `a` on `spec` and decodes the one-hot outputs back.
pub fn quantize(a: &ActionVector, spec: &VirtualCameraSpec, codec: &ActionCodec) -> Result<ActionVector, CodecError> {
    let t = codec.encode(a, spec, false)?;
    Ok(codec.decode(&PolicyOutputs::from_target(&t, 1.0), spec))
}

/// The view the fine stage sees for `a` when the coarse stage decodes it
/// exactly: centered on the coarse quantization of `a`.
pub fn expert_zoom(
    a: &ActionVector,
    coarse_spec: &VirtualCameraSpec,
    zoom_factor: f64,
    codec: &ActionCodec,
) -> Result<(ActionVector, VirtualCameraSpec), C2fError> {
    let coarse = quantize(a, coarse_spec, codec)?;
    let zoomed = zoom_spec(coarse_spec, &coarse.position, zoom_factor)?;
    Ok((coarse, zoomed))
}

/// Refine label for one action: does quantizing through the coarse view move
/// it more than the threshold away from its quantization through the zoomed
/// view?
pub fn refine_label(a: &ActionVector, coarse_spec: &VirtualCameraSpec, zoom_factor: f64, codec: &ActionCodec) -> Result<bool, C2fError> {
    let (coarse, zoomed) = expert_zoom(a, coarse_spec, zoom_factor, codec)?;
    let fine = quantize(a, &zoomed, codec)?;
    Ok(label_refine(&coarse, &fine))
}

/// Per-action refine labels; actions that fall outside either view are
/// reported as `None` and logged.
pub fn make_refine_labels(
    actions: &[ActionVector],
    coarse_spec: &VirtualCameraSpec,
    zoom_factor: f64,
    codec: &ActionCodec,
) -> Result<Vec<Option<bool>>, C2fError> {
    if !(zoom_factor > 1.0) {
        return Err(RenderError::Usage(format!("zoom factor must be > 1, got {zoom_factor}")).into());
    }
    Ok(actions
        .iter()
        .enumerate()
        .map(|(i, a)| match refine_label(a, coarse_spec, zoom_factor, codec) {
            Ok(l) => Some(l),
            Err(e) => {
                warn!("keyframe {i} excluded from refine labels: {e}");
                None
            }
        })
        .collect())
}

/// Position of a pixel center at a given depth bin center; used to build
/// actions that quantize without error.
pub fn bin_center_position(spec: &VirtualCameraSpec, codec: &ActionCodec, px: usize, py: usize, depth_bin: usize) -> Vec3 {
    spec.projector().unproject(px as f64 + 0.5, py as f64 + 0.5, codec.depth_bin_center(spec, depth_bin))
}
