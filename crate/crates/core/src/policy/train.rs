//! AdamW training loop, metrics log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, scale_outputs, LossBreakdown};
use super::model::{backward, forward, layout, ModelConfig, Params, PolicyInput, TensorInfo};
use super::PolicyError;
use crate::codec::EncodedActionTarget;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub input: PolicyInput,
    pub target: EncodedActionTarget,
}

/// AdamW with decoupled weight decay. For each parameter θ with gradient g at
/// step t (starting at 1):
///
/// ```text
/// m ← β₁·m + (1 − β₁)·g
/// v ← β₂·v + (1 − β₂)·g²
/// θ ← θ − lr·( (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε) + λ·θ )
/// ```
///
/// Weight decay λ applies to matrices only; vectors (biases, norm gains) are
/// not decayed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &Params) -> Self {
        let mut decay = vec![false; params.len()];
        for t in &params.tensors {
            if t.shape.len() > 1 {
                decay[t.offset..t.offset + t.len()].fill(true);
            }
        }
        Self { cfg, m: vec![0.0; params.len()], v: vec![0.0; params.len()], decay, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let update = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
            let wd = if self.decay[i] { c.weight_decay * params[i] } else { 0.0 };
            params[i] -= c.lr * (update + wd);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 8, optimizer: AdamWConfig::default(), max_grad_norm: Some(10.0), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Mean loss and accumulated gradient over `samples`.
pub fn batch_loss_and_grad(params: &Params, samples: &[&TrainSample]) -> (LossBreakdown, Params) {
    let mut grads = params.zeros_like();
    let mut total = LossBreakdown::default();
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        let (out, cache) = forward(params, &s.input);
        let (l, mut dout) = loss_and_grad(&out, &s.target);
        scale_outputs(&mut dout, w);
        backward(params, &s.input, &cache, &dout, &mut grads);
        total.add_scaled(&l, w);
    }
    (total, grads)
}

/// Stateful trainer; batches are drawn from a seeded per-epoch shuffle.
pub struct Trainer {
    pub params: Params,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(params: Params, cfg: TrainConfig) -> Self {
        let opt = AdamW::new(cfg.optimizer, &params);
        Self { params, cfg, opt, rng: rng_for(cfg.seed, "policy/batches"), order: vec![], cursor: 0, step: 0 }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.cfg.batch_size >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step; returns the batch-mean loss before the update.
    pub fn train_step(&mut self, samples: &[TrainSample]) -> Result<StepMetrics, PolicyError> {
        if samples.is_empty() {
            return Err(PolicyError::Usage("training needs at least one sample".into()));
        }
        let idx = self.next_batch(samples.len());
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let (loss, mut grads) = batch_loss_and_grad(&self.params, &batch);
        let step = self.step;
        if !loss.total().is_finite() || grads.data.iter().any(|g| !g.is_finite()) {
            return Err(PolicyError::NonFinite { step, detail: format!("{loss:?}") });
        }
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = grads.data.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grads.data.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        self.opt.step(&mut self.params.data, &grads.data);
        self.step += 1;
        Ok(StepMetrics { step, loss })
    }
}

/// Runs `cfg.steps` optimizer steps. `observe` sees every step's metrics and
/// the updated parameters and may stop training early by returning `false`.
pub fn train(
    samples: &[TrainSample],
    params: Params,
    cfg: TrainConfig,
    mut observe: impl FnMut(&StepMetrics, &Params) -> bool,
) -> Result<(Params, Vec<StepMetrics>), PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::Usage("training needs at least one sample".into()));
    }
    let mut trainer = Trainer::new(params, cfg);
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let m = trainer.train_step(samples)?;
        log.push(m);
        if !observe(&m, &trainer.params) {
            break;
        }
    }
    Ok((trainer.params, log))
}

pub const METRICS_HEADER: &str = "step,total,trans,rot,open,collision,depth,dyn_inf";

pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<(), PolicyError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(f, "{},{},{},{},{},{},{},{}", r.step, l.total(), l.trans, l.rot, l.open, l.collision, l.depth, l.dyn_inf)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the weights file.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes little-endian f32 weights to `path` and the JSON manifest next to
/// it (`<path>.json`).
pub fn save_checkpoint(params: &Params, path: &Path) -> Result<(), PolicyError> {
    let bytes: Vec<u8> = params.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let manifest = Manifest {
        config: params.cfg,
        dtype: "f32le".into(),
        tensors: params.tensors.iter().map(|t| ManifestEntry { name: t.name.clone(), shape: t.shape.clone(), offset: 4 * t.offset }).collect(),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Params, PolicyError> {
    let bad = |m: String| PolicyError::Checkpoint(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(manifest_path(path)).map_err(|e| bad(format!("manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if manifest.dtype != "f32le" {
        return Err(bad(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut params = Params::zeros(&manifest.config)?;
    let expected: Vec<TensorInfo> = layout(&manifest.config);
    if manifest.tensors.len() != expected.len()
        || manifest.tensors.iter().zip(&expected).any(|(m, e)| m.name != e.name || m.shape != e.shape || m.offset != 4 * e.offset)
    {
        return Err(bad("tensor table does not match the model config".into()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * params.len() {
        return Err(bad(format!("expected {} bytes, found {}", 4 * params.len(), bytes.len())));
    }
    for (v, c) in params.data.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
    }
    Ok(params)
}
