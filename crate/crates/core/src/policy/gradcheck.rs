//! Central finite-difference check of the analytic gradients.

use rand::Rng;
use serde::Serialize;

use super::loss::loss;
use super::model::{forward, ModelConfig, Params, PolicyInput};
use super::train::{batch_loss_and_grad, TrainSample};
use super::{encode_language, PolicyError};
use crate::codec::{ActionCodec, EncodedActionTarget, DEFAULT_HEATMAP_SIGMA, DEPTH_BINS, ROT_BINS};
use crate::seed::rng_for;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradient magnitude below which errors are measured absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Random input and target for `cfg`.
pub fn random_sample(cfg: &ModelConfig, seed: u64) -> TrainSample {
    let mut rng = rng_for(seed, "gradcheck/sample");
    let patches = (0..cfg.n_image_tokens() * cfg.patch_dim()).map(|_| rng.gen::<f64>()).collect();
    let lang = encode_language("stack the red block on the blue block", cfg).tokens;
    let codec = ActionCodec::new(DEFAULT_HEATMAP_SIGMA, 1.0, 1.0).expect("valid codec");
    let r = cfg.image_size as f64;
    let heatmap = codec.gaussian_heatmap(cfg.image_size as u32, rng.gen_range(0.0..r), rng.gen_range(0.0..r));
    let target = EncodedActionTarget {
        resolution: cfg.image_size as u32,
        heatmap,
        depth_bin: rng.gen_range(0..DEPTH_BINS),
        rot_bins: [rng.gen_range(0..ROT_BINS), rng.gen_range(0..ROT_BINS), rng.gen_range(0..ROT_BINS)],
        gripper_open: rng.gen(),
        collision_allowed: rng.gen(),
        refine: rng.gen(),
    };
    TrainSample { input: PolicyInput { patches, lang }, target }
}

fn total_loss(params: &Params, s: &TrainSample) -> f64 {
    loss(&forward(params, &s.input).0, &s.target).total()
}

/// Compares analytic and central-difference gradients on up to
/// `per_tensor` randomly chosen entries of every parameter tensor.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, per_tensor: usize, h: f64, tolerance: f64) -> Result<GradcheckReport, PolicyError> {
    let mut params = Params::init(cfg, seed)?;
    let sample = random_sample(cfg, seed);
    let (_, grads) = batch_loss_and_grad(&params, &[&sample]);
    let mut rng = rng_for(seed, "gradcheck/entries");
    let mut tensors = Vec::new();
    for t in params.tensors.clone() {
        let n = t.len();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..n)).collect() };
        let mut worst = TensorCheck { name: t.name.clone(), checked: picks.len(), max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in picks {
            let idx = t.offset + i;
            let orig = params.data[idx];
            params.data[idx] = orig + h;
            let up = total_loss(&params, &sample);
            params.data[idx] = orig - h;
            let down = total_loss(&params, &sample);
            params.data[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.data[idx];
            let e = rel_error(analytic, numeric);
            if e >= worst.max_rel_error {
                worst = TensorCheck { max_rel_error: e, worst_index: i, analytic, numeric, ..worst };
            }
        }
        tensors.push(worst);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { config: *cfg, seed, tensors, max_rel_error, tolerance, passed: max_rel_error <= tolerance })
}

/// The three small configurations used by the gradient-check suite.
pub fn suite_configs() -> Vec<ModelConfig> {
    let base = ModelConfig { embed_dim: 16, layers: 2, heads: 2, hidden_dim: 32, ..ModelConfig::default() };
    vec![base, ModelConfig { heads: 4, hidden_dim: 24, ..base }, ModelConfig { heads: 1, hidden_dim: 16, ..base }]
}
