//! Toy-scale tokenized attention policy.
//!
//! The input sequence is `[image patches ‖ language ‖ depth tokens]`. Each
//! image token emits one tile of the heatmap, each depth token one depth-class
//! logit, and the rotation, gripper, collision and refine heads read the mean
//! of all final tokens.

pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::codec::{ActionCodec, PolicyOutputs};
use crate::render::VirtualImage;
use crate::seed::rng_for;
pub use loss::{loss, loss_and_grad, LossBreakdown};
pub use model::{backward, forward, ModelConfig, Params, PolicyInput, IMAGE_CHANNELS};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("model config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-length language token matrix (`n_tokens × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoding {
    pub n_tokens: usize,
    pub dim: usize,
    pub tokens: Vec<f64>,
}

pub trait LanguageEncoder {
    fn encode(&self, text: &str) -> LanguageEncoding;
}

pub const PAD_TOKEN: &str = "<pad>";

/// Maps each whitespace-separated, lowercased word to a fixed pseudo-random
/// vector keyed by a hash of the word and `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashEncoder {
    pub n_tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(n_tokens: usize, dim: usize) -> Self {
        Self { n_tokens, dim, seed: 0 }
    }

    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = rng_for(self.seed, &format!("lang/{word}"));
        let s = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    }
}

impl LanguageEncoder for HashEncoder {
    fn encode(&self, text: &str) -> LanguageEncoding {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split_whitespace().take(self.n_tokens).collect();
        let pad = self.word_vector(PAD_TOKEN);
        let mut tokens = Vec::with_capacity(self.n_tokens * self.dim);
        for i in 0..self.n_tokens {
            match words.get(i) {
                Some(w) => tokens.extend(self.word_vector(w)),
                None => tokens.extend_from_slice(&pad),
            }
        }
        LanguageEncoding { n_tokens: self.n_tokens, dim: self.dim, tokens }
    }
}

pub fn encode_language(text: &str, cfg: &ModelConfig) -> LanguageEncoding {
    HashEncoder::new(cfg.n_lang_tokens, cfg.embed_dim).encode(text)
}

/// Raw patch features in raster patch order. Each patch is `patch × patch ×
/// 4` values (row, column, channel): RGB scaled to `[0, 1]` and depth mapped
/// linearly from `depth_range` to `[0, 1]`, with background at 1.
pub fn patch_features(img: &VirtualImage, depth_range: (f64, f64), cfg: &ModelConfig) -> Result<Vec<f64>, PolicyError> {
    let r = img.spec.resolution as usize;
    if r != cfg.image_size {
        return Err(PolicyError::Usage(format!("image is {r}×{r}, the model expects {0}×{0}", cfg.image_size)));
    }
    let (g, p) = (cfg.grid(), cfg.patch);
    let (lo, hi) = depth_range;
    let mut out = Vec::with_capacity(cfg.n_image_tokens() * cfg.patch_dim());
    for tr in 0..g {
        for tc in 0..g {
            for py in 0..p {
                for px in 0..p {
                    let i = (tr * p + py) * r + tc * p + px;
                    out.extend(img.rgb[3 * i..3 * i + 3].iter().map(|&c| c as f64 / 255.0));
                    let d = img.depth[i] as f64;
                    out.push(if d.is_finite() && d < f32::MAX as f64 { ((d - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 });
                }
            }
        }
    }
    Ok(out)
}

/// Image tokens after patch embedding and positional embedding.
pub fn tokenize_image(params: &Params, patches: &[f64]) -> Vec<f64> {
    let cfg = &params.cfg;
    let input = PolicyInput { patches: patches.to_vec(), lang: vec![0.0; cfg.n_lang_tokens * cfg.embed_dim] };
    let mut x = model::embed(params, &input);
    x.truncate(cfg.n_image_tokens() * cfg.embed_dim);
    x
}

pub fn make_input(img: &VirtualImage, instruction: &str, codec: &ActionCodec, cfg: &ModelConfig) -> Result<PolicyInput, PolicyError> {
    let patches = patch_features(img, codec.depth_range(&img.spec), cfg)?;
    Ok(PolicyInput { patches, lang: encode_language(instruction, cfg).tokens })
}

/// A configuration and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: Params,
}

impl Policy {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        Ok(Self { params: Params::init(cfg, seed)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.cfg
    }

    pub fn input_tokens(&self) -> usize {
        self.params.cfg.seq_len()
    }

    pub fn layers(&self) -> usize {
        self.params.cfg.layers
    }

    pub fn predict(&self, input: &PolicyInput) -> PolicyOutputs {
        forward(&self.params, input).0
    }
}
