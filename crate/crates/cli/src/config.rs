//! Flat `key = value` run configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws* ('#' any*)?
//! key     := [a-z0-9_.]+
//! ```
//!
//! Values are parsed according to the key's type. Unknown keys and
//! duplicate keys are errors. `--set key=value` flags apply on top of the
//! file in order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use veye_core::c2f::RefinePolicy;
use veye_core::keypoint::{DEFAULT_MIN_GAP, DEFAULT_VEL_EPS};
use veye_core::policy::train::{AdamWConfig, TrainConfig};
use veye_core::policy::ModelConfig;
use veye_core::viewpoint::{DEFAULT_HALF_EXTENT, DEFAULT_MAX_RETRIES, DEFAULT_RESOLUTION, DISTANCE_FACTOR};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub llm_endpoint: String,
    pub llm_model: String,
    pub llm_api_key_env: String,
    pub llm_max_retries: usize,
    pub llm_requery_every_k_keyframes: usize,
    pub view_elev: f64,
    pub view_azim: f64,
    pub view_half_extent: f64,
    pub view_resolution: u32,
    pub view_distance_factor: f64,
    pub codec_sigma_px: f64,
    pub keypoint_vel_eps: f64,
    pub keypoint_min_gap: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_fine: bool,
    pub c2f_zoom_factor: f64,
    pub c2f_refine_policy: RefinePolicy,
    pub gradcheck_step: f64,
    pub gradcheck_tolerance: f64,
    pub gradcheck_per_tensor: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig { embed_dim: 32, heads: 2, hidden_dim: 64, ..ModelConfig::default() };
        let train =
            TrainConfig { steps: 400, batch_size: 4, optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() }, ..TrainConfig::default() };
        Self {
            seed: 0,
            llm_endpoint: String::new(),
            llm_model: "gpt-4o".into(),
            llm_api_key_env: "OPENAI_API_KEY".into(),
            llm_max_retries: DEFAULT_MAX_RETRIES,
            llm_requery_every_k_keyframes: 0,
            view_elev: 90.0,
            view_azim: 0.0,
            view_half_extent: DEFAULT_HALF_EXTENT,
            view_resolution: DEFAULT_RESOLUTION,
            view_distance_factor: DISTANCE_FACTOR,
            codec_sigma_px: veye_core::codec::DEFAULT_HEATMAP_SIGMA,
            keypoint_vel_eps: DEFAULT_VEL_EPS,
            keypoint_min_gap: DEFAULT_MIN_GAP,
            model,
            train,
            train_fine: true,
            c2f_zoom_factor: veye_core::c2f::DEFAULT_ZOOM_FACTOR,
            c2f_refine_policy: RefinePolicy::Learned,
            gradcheck_step: veye_core::policy::gradcheck::DEFAULT_STEP,
            gradcheck_tolerance: veye_core::policy::gradcheck::DEFAULT_TOLERANCE,
            gradcheck_per_tensor: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| ConfigError(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_refine(key: &str, value: &str) -> Result<RefinePolicy, ConfigError> {
    match value {
        "learned" => Ok(RefinePolicy::Learned),
        "force_on" => Ok(RefinePolicy::ForceOn),
        "force_off" => Ok(RefinePolicy::ForceOff),
        _ => Err(ConfigError(format!("{key}: expected learned, force_on or force_off, got {value:?}"))),
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "llm.endpoint",
    "llm.model",
    "llm.api_key_env",
    "llm.max_retries",
    "llm.requery_every_k_keyframes",
    "view.elev",
    "view.azim",
    "view.half_extent",
    "view.resolution",
    "view.distance_factor",
    "codec.sigma_px",
    "keypoint.vel_eps",
    "keypoint.min_gap",
    "model.layers",
    "model.embed_dim",
    "model.heads",
    "model.hidden_dim",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.weight_decay",
    "train.max_grad_norm",
    "train.fine",
    "c2f.zoom_factor",
    "c2f.refine_policy",
    "gradcheck.step",
    "gradcheck.tolerance",
    "gradcheck.per_tensor",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "llm.endpoint" => self.llm_endpoint = v.to_string(),
            "llm.model" => self.llm_model = v.to_string(),
            "llm.api_key_env" => self.llm_api_key_env = v.to_string(),
            "llm.max_retries" => self.llm_max_retries = parse(key, v)?,
            "llm.requery_every_k_keyframes" => self.llm_requery_every_k_keyframes = parse(key, v)?,
            "view.elev" => self.view_elev = parse(key, v)?,
            "view.azim" => self.view_azim = parse(key, v)?,
            "view.half_extent" => self.view_half_extent = parse(key, v)?,
            "view.resolution" => self.view_resolution = parse(key, v)?,
            "view.distance_factor" => self.view_distance_factor = parse(key, v)?,
            "codec.sigma_px" => self.codec_sigma_px = parse(key, v)?,
            "keypoint.vel_eps" => self.keypoint_vel_eps = parse(key, v)?,
            "keypoint.min_gap" => self.keypoint_min_gap = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.optimizer.lr = parse(key, v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse(key, v)?,
            "train.eps" => self.train.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = parse(key, v)?,
            "train.max_grad_norm" => {
                let x: f64 = parse(key, v)?;
                self.train.max_grad_norm = (x > 0.0).then_some(x);
            }
            "train.fine" => self.train_fine = parse(key, v)?,
            "c2f.zoom_factor" => self.c2f_zoom_factor = parse(key, v)?,
            "c2f.refine_policy" => self.c2f_refine_policy = parse_refine(key, v)?,
            "gradcheck.step" => self.gradcheck_step = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck_tolerance = parse(key, v)?,
            "gradcheck.per_tensor" => self.gradcheck_per_tensor = parse(key, v)?,
            _ => return Err(ConfigError(format!("unknown config key {key:?} (valid keys: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.') || k.is_empty() {
                return Err(ConfigError(format!("line {}: invalid key {k:?}", n + 1)));
            }
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(ConfigError(format!("line {}: duplicate key {k:?} (first set on line {prev})", n + 1)));
            }
            cfg.set(k, v).map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?;
                Self::parse_text(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.model.validate().map_err(|e| ConfigError(e.to_string()))?;
        if !(cfg.c2f_zoom_factor > 1.0) {
            return Err(ConfigError(format!("c2f.zoom_factor must be > 1, got {}", cfg.c2f_zoom_factor)));
        }
        if cfg.train.batch_size == 0 {
            return Err(ConfigError("train.batch_size must be positive".into()));
        }
        Ok(cfg)
    }

    /// The config as text in the file grammar; `parse_text` reads it back.
    pub fn to_text(&self) -> String {
        let refine = match self.c2f_refine_policy {
            RefinePolicy::Learned => "learned",
            RefinePolicy::ForceOn => "force_on",
            RefinePolicy::ForceOff => "force_off",
        };
        let o = &self.train.optimizer;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("llm.endpoint", self.llm_endpoint.clone()),
            ("llm.model", self.llm_model.clone()),
            ("llm.api_key_env", self.llm_api_key_env.clone()),
            ("llm.max_retries", self.llm_max_retries.to_string()),
            ("llm.requery_every_k_keyframes", self.llm_requery_every_k_keyframes.to_string()),
            ("view.elev", self.view_elev.to_string()),
            ("view.azim", self.view_azim.to_string()),
            ("view.half_extent", self.view_half_extent.to_string()),
            ("view.resolution", self.view_resolution.to_string()),
            ("view.distance_factor", self.view_distance_factor.to_string()),
            ("codec.sigma_px", self.codec_sigma_px.to_string()),
            ("keypoint.vel_eps", self.keypoint_vel_eps.to_string()),
            ("keypoint.min_gap", self.keypoint_min_gap.to_string()),
            ("model.layers", self.model.layers.to_string()),
            ("model.embed_dim", self.model.embed_dim.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.hidden_dim", self.model.hidden_dim.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", o.lr.to_string()),
            ("train.beta1", o.beta1.to_string()),
            ("train.beta2", o.beta2.to_string()),
            ("train.eps", o.eps.to_string()),
            ("train.weight_decay", o.weight_decay.to_string()),
            ("train.max_grad_norm", self.train.max_grad_norm.unwrap_or(0.0).to_string()),
            ("train.fine", self.train_fine.to_string()),
            ("c2f.zoom_factor", self.c2f_zoom_factor.to_string()),
            ("c2f.refine_policy", refine.to_string()),
            ("gradcheck.step", self.gradcheck_step.to_string()),
            ("gradcheck.tolerance", self.gradcheck_tolerance.to_string()),
            ("gradcheck.per_tensor", self.gradcheck_per_tensor.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
