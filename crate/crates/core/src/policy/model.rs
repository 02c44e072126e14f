//! Tokenized self-attention policy: forward pass with cached activations and
//! the matching hand-written backward pass.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, softmax_inplace};
use super::PolicyError;
use crate::codec::{PolicyOutputs, DEPTH_BINS, ROT_BINS};
use crate::seed::rng_for;

pub const IMAGE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub n_lang_tokens: usize,
    pub n_depth_tokens: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub rot_bins_per_axis: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch: 14,
            n_lang_tokens: 77,
            n_depth_tokens: DEPTH_BINS,
            layers: 8,
            embed_dim: 64,
            heads: 4,
            hidden_dim: 128,
            rot_bins_per_axis: ROT_BINS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image_size {} is not a multiple of patch {}", self.image_size, self.patch));
        }
        if self.n_depth_tokens != DEPTH_BINS || self.rot_bins_per_axis != ROT_BINS {
            return bad(format!("the codec needs {DEPTH_BINS} depth tokens and {ROT_BINS} rotation bins"));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn n_image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.n_image_tokens() + self.n_lang_tokens + self.n_depth_tokens
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * IMAGE_CHANNELS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor list for `cfg`.
pub fn layout(cfg: &ModelConfig) -> Vec<TensorInfo> {
    let (e, h, g, p2) = (cfg.embed_dim, cfg.hidden_dim, cfg.grid(), cfg.patch * cfg.patch);
    let mut shapes: Vec<(String, Vec<usize>)> = vec![
        ("patch_w".into(), vec![cfg.patch_dim(), e]),
        ("patch_b".into(), vec![e]),
        ("pos_row".into(), vec![g, e]),
        ("pos_col".into(), vec![g, e]),
        ("lang_w".into(), vec![e, e]),
        ("lang_b".into(), vec![e]),
        ("lang_pos".into(), vec![cfg.n_lang_tokens, e]),
        ("depth_tokens".into(), vec![cfg.n_depth_tokens, e]),
    ];
    for l in 0..cfg.layers {
        for (n, s) in [
            ("ln1_g", vec![e]),
            ("ln1_b", vec![e]),
            ("wq", vec![e, e]),
            ("bq", vec![e]),
            ("wk", vec![e, e]),
            ("bk", vec![e]),
            ("wv", vec![e, e]),
            ("bv", vec![e]),
            ("wo", vec![e, e]),
            ("bo", vec![e]),
            ("ln2_g", vec![e]),
            ("ln2_b", vec![e]),
            ("w1", vec![e, h]),
            ("b1", vec![h]),
            ("w2", vec![h, e]),
            ("b2", vec![e]),
        ] {
            shapes.push((format!("layer{l}.{n}"), s));
        }
    }
    for (n, s) in [
        ("lnf_g", vec![e]),
        ("lnf_b", vec![e]),
        ("heatmap_w", vec![e, p2]),
        ("heatmap_b", vec![p2]),
        ("depth_w", vec![e]),
        ("depth_b", vec![1]),
        ("rot_w", vec![e, 3 * cfg.rot_bins_per_axis]),
        ("rot_b", vec![3 * cfg.rot_bins_per_axis]),
        ("open_w", vec![e, 2]),
        ("open_b", vec![2]),
        ("collision_w", vec![e, 2]),
        ("collision_b", vec![2]),
        ("refine_w", vec![e, 2]),
        ("refine_b", vec![2]),
    ] {
        shapes.push((n.into(), s));
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let t = TensorInfo { name, offset, shape };
            offset += t.len();
            t
        })
        .collect()
}

/// All trainable tensors in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cfg: ModelConfig,
    pub tensors: Vec<TensorInfo>,
    pub data: Vec<f64>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let tensors = layout(cfg);
        let n = tensors.last().map(|t| t.offset + t.len()).unwrap_or(0);
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Ok(Self { cfg: *cfg, tensors, data: vec![0.0; n], index })
    }

    /// Seeded initialization: layer-norm gains 1, biases 0, weights
    /// `N(0, 1/fan_in)`, embeddings `N(0, 0.5²)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = rng_for(seed, "policy/init");
        for t in p.tensors.clone() {
            let base = t.name.rsplit('.').next().unwrap();
            let std = if base.ends_with("_g") {
                None
            } else if t.shape.len() == 1 && base != "depth_w" {
                Some(0.0)
            } else if matches!(base, "pos_row" | "pos_col" | "lang_pos" | "depth_tokens") {
                Some(0.5)
            } else {
                Some(1.0 / (t.shape[0] as f64).sqrt())
            };
            let slot = &mut p.data[t.offset..t.offset + t.len()];
            match std {
                None => slot.fill(1.0),
                Some(s) => slot.iter_mut().for_each(|v| *v = s * rng.sample::<f64, _>(StandardNormal)),
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn info(&self, name: &str) -> &TensorInfo {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no tensor {name}"))]
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let t = self.info(name);
        &self.data[t.offset..t.offset + t.len()]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        let t = self.info(name).clone();
        &mut self.data[t.offset..t.offset + t.len()]
    }

    /// A zeroed buffer with this layout, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self { data: vec![0.0; self.data.len()], ..self.clone() }
    }
}

/// Model inputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    /// `n_image_tokens × patch_dim` raw patch features in raster order.
    pub patches: Vec<f64>,
    /// `n_lang_tokens × embed_dim` language encoding.
    pub lang: Vec<f64>,
}

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    y: Vec<f64>,
    pooled: Vec<f64>,
}

/// `[S, E]` → `[heads, S, dh]`.
fn split_heads(x: &[f64], s: usize, heads: usize, dh: usize) -> Vec<f64> {
    let e = heads * dh;
    let mut out = vec![0.0; x.len()];
    for t in 0..s {
        for hd in 0..heads {
            out[(hd * s + t) * dh..(hd * s + t + 1) * dh].copy_from_slice(&x[t * e + hd * dh..t * e + (hd + 1) * dh]);
        }
    }
    out
}

fn merge_heads(x: &[f64], s: usize, heads: usize, dh: usize) -> Vec<f64> {
    let e = heads * dh;
    let mut out = vec![0.0; x.len()];
    for t in 0..s {
        for hd in 0..heads {
            out[t * e + hd * dh..t * e + (hd + 1) * dh].copy_from_slice(&x[(hd * s + t) * dh..(hd * s + t + 1) * dh]);
        }
    }
    out
}

const MEAN_HEADS: [(&str, &str); 4] = [("rot_w", "rot_b"), ("open_w", "open_b"), ("collision_w", "collision_b"), ("refine_w", "refine_b")];

/// Input token matrix (`seq_len × embed_dim`).
pub fn embed(params: &Params, input: &PolicyInput) -> Vec<f64> {
    let cfg = &params.cfg;
    let (e, g, ni, nl) = (cfg.embed_dim, cfg.grid(), cfg.n_image_tokens(), cfg.n_lang_tokens);
    let mut x = linear(&input.patches, ni, cfg.patch_dim(), params.get("patch_w"), params.get("patch_b"), e);
    let (pr, pc) = (params.get("pos_row"), params.get("pos_col"));
    for t in 0..ni {
        let (r, c) = (t / g, t % g);
        for j in 0..e {
            x[t * e + j] += pr[r * e + j] + pc[c * e + j];
        }
    }
    let mut lang = linear(&input.lang, nl, e, params.get("lang_w"), params.get("lang_b"), e);
    for (v, p) in lang.iter_mut().zip(params.get("lang_pos")) {
        *v += p;
    }
    x.extend_from_slice(&lang);
    x.extend_from_slice(params.get("depth_tokens"));
    x
}

pub fn forward(params: &Params, input: &PolicyInput) -> (PolicyOutputs, ForwardCache) {
    let cfg = &params.cfg;
    let (s, e, hd, heads) = (cfg.seq_len(), cfg.embed_dim, cfg.hidden_dim, cfg.heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed(params, input);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |n: &str| params.get(&format!("layer{l}.{n}"));
        let (h1, xhat1, rstd1) = layer_norm(&x, s, e, p("ln1_g"), p("ln1_b"));
        let q = split_heads(&linear(&h1, s, e, p("wq"), p("bq"), e), s, heads, dh);
        let k = split_heads(&linear(&h1, s, e, p("wk"), p("bk"), e), s, heads, dh);
        let v = split_heads(&linear(&h1, s, e, p("wv"), p("bv"), e), s, heads, dh);
        let mut probs = vec![0.0; heads * s * s];
        let mut attn_h = vec![0.0; heads * s * dh];
        for h in 0..heads {
            let (qh, kh, vh) = (&q[h * s * dh..(h + 1) * s * dh], &k[h * s * dh..(h + 1) * s * dh], &v[h * s * dh..(h + 1) * s * dh]);
            let ph = &mut probs[h * s * s..(h + 1) * s * s];
            gemm(s, dh, s, qh, false, kh, true, ph, 0.0);
            for row in ph.chunks_exact_mut(s) {
                row.iter_mut().for_each(|z| *z *= scale);
                softmax_inplace(row);
            }
            gemm(s, s, dh, ph, false, vh, false, &mut attn_h[h * s * dh..(h + 1) * s * dh], 0.0);
        }
        let attn = merge_heads(&attn_h, s, heads, dh);
        let o = linear(&attn, s, e, p("wo"), p("bo"), e);
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += ov;
        }
        let (h2, xhat2, rstd2) = layer_norm(&x, s, e, p("ln2_g"), p("ln2_b"));
        let pre = linear(&h2, s, e, p("w1"), p("b1"), hd);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let f = linear(&act, s, hd, p("w2"), p("b2"), e);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
        layers.push(LayerCache { xhat1, rstd1, h1, q, k, v, probs, attn, xhat2, rstd2, h2, pre, act });
    }
    let (y, xhatf, rstdf) = layer_norm(&x, s, e, params.get("lnf_g"), params.get("lnf_b"));

    let (ni, nl, g, pt) = (cfg.n_image_tokens(), cfg.n_lang_tokens, cfg.grid(), cfg.patch);
    let r = cfg.image_size;
    let tiles = linear(&y[..ni * e], ni, e, params.get("heatmap_w"), params.get("heatmap_b"), pt * pt);
    let mut out = PolicyOutputs::zeros(r as u32);
    for t in 0..ni {
        let (tr, tc) = (t / g, t % g);
        for py in 0..pt {
            let dst = (tr * pt + py) * r + tc * pt;
            out.heatmap_logits[dst..dst + pt].copy_from_slice(&tiles[t * pt * pt + py * pt..t * pt * pt + (py + 1) * pt]);
        }
    }
    let (dw, db) = (params.get("depth_w"), params.get("depth_b")[0]);
    for kk in 0..cfg.n_depth_tokens {
        let row = &y[(ni + nl + kk) * e..(ni + nl + kk + 1) * e];
        out.depth_logits[kk] = db + row.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
    }
    let mut pooled = vec![0.0; e];
    for row in y.chunks_exact(e) {
        for (m, v) in pooled.iter_mut().zip(row) {
            *m += v;
        }
    }
    pooled.iter_mut().for_each(|m| *m /= s as f64);
    let heads_out: Vec<Vec<f64>> = MEAN_HEADS
        .iter()
        .map(|(w, b)| {
            let n = params.get(b).len();
            linear(&pooled, 1, e, params.get(w), params.get(b), n)
        })
        .collect();
    out.rot_logits = heads_out[0].clone();
    out.open_logits = [heads_out[1][0], heads_out[1][1]];
    out.collision_logits = [heads_out[2][0], heads_out[2][1]];
    out.refine_logits = [heads_out[3][0], heads_out[3][1]];
    (out, ForwardCache { layers, xhatf, rstdf, y, pooled })
}

/// Accumulates parameter gradients of a scalar whose gradient with respect to
/// the outputs is `dout` into `grads`.
pub fn backward(params: &Params, input: &PolicyInput, cache: &ForwardCache, dout: &PolicyOutputs, grads: &mut Params) {
    let cfg = &params.cfg;
    let (s, e, hd, heads) = (cfg.seq_len(), cfg.embed_dim, cfg.hidden_dim, cfg.heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (ni, nl, g, pt) = (cfg.n_image_tokens(), cfg.n_lang_tokens, cfg.grid(), cfg.patch);
    let r = cfg.image_size;
    let y = &cache.y;
    let mut dy = vec![0.0; s * e];

    // Heatmap tiles.
    let mut dtiles = vec![0.0; ni * pt * pt];
    for t in 0..ni {
        let (tr, tc) = (t / g, t % g);
        for py in 0..pt {
            let src = (tr * pt + py) * r + tc * pt;
            dtiles[t * pt * pt + py * pt..t * pt * pt + (py + 1) * pt].copy_from_slice(&dout.heatmap_logits[src..src + pt]);
        }
    }
    {
        let (gw, gb) = split2(grads, "heatmap_w", "heatmap_b");
        let dyi = linear_backward(&y[..ni * e], ni, e, params.get("heatmap_w"), pt * pt, &dtiles, gw, gb);
        dy[..ni * e].copy_from_slice(&dyi);
    }

    // Depth readout.
    {
        let dw = params.get("depth_w").to_vec();
        let mut gdw = vec![0.0; e];
        let mut gdb = 0.0;
        for kk in 0..cfg.n_depth_tokens {
            let gk = dout.depth_logits[kk];
            let row = (ni + nl + kk) * e;
            gdb += gk;
            for j in 0..e {
                gdw[j] += gk * y[row + j];
                dy[row + j] += gk * dw[j];
            }
        }
        grads.get_mut("depth_w").iter_mut().zip(&gdw).for_each(|(a, b)| *a += b);
        grads.get_mut("depth_b")[0] += gdb;
    }

    // Mean-pooled heads.
    let douts: [&[f64]; 4] = [&dout.rot_logits, &dout.open_logits, &dout.collision_logits, &dout.refine_logits];
    let mut dpool = vec![0.0; e];
    for ((w, b), d) in MEAN_HEADS.iter().zip(douts) {
        let (gw, gb) = split2(grads, w, b);
        let dp = linear_backward(&cache.pooled, 1, e, params.get(w), d.len(), d, gw, gb);
        dpool.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
    }
    for row in dy.chunks_exact_mut(e) {
        for (a, b) in row.iter_mut().zip(&dpool) {
            *a += b / s as f64;
        }
    }

    let mut dx = {
        let (gg, gb) = split2(grads, "lnf_g", "lnf_b");
        layer_norm_backward(&dy, &cache.xhatf, &cache.rstdf, s, e, params.get("lnf_g"), gg, gb)
    };

    for l in (0..cfg.layers).rev() {
        let c = &cache.layers[l];
        let name = |n: &str| format!("layer{l}.{n}");
        let p = |n: &str| params.get(&name(n));

        // Feed-forward block.
        let dact = {
            let (gw, gb) = split2(grads, &name("w2"), &name("b2"));
            linear_backward(&c.act, s, hd, p("w2"), e, &dx, gw, gb)
        };
        let dpre: Vec<f64> = dact.iter().zip(&c.pre).map(|(d, &z)| d * gelu_grad(z)).collect();
        let dh2 = {
            let (gw, gb) = split2(grads, &name("w1"), &name("b1"));
            linear_backward(&c.h2, s, e, p("w1"), hd, &dpre, gw, gb)
        };
        let dres = {
            let (gg, gb) = split2(grads, &name("ln2_g"), &name("ln2_b"));
            layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, s, e, p("ln2_g"), gg, gb)
        };
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

        // Attention block.
        let dattn = {
            let (gw, gb) = split2(grads, &name("wo"), &name("bo"));
            linear_backward(&c.attn, s, e, p("wo"), e, &dx, gw, gb)
        };
        let dattn_h = split_heads(&dattn, s, heads, dh);
        let mut dq = vec![0.0; heads * s * dh];
        let mut dk = vec![0.0; heads * s * dh];
        let mut dv = vec![0.0; heads * s * dh];
        let mut dscores = vec![0.0; s * s];
        for h in 0..heads {
            let rng = h * s * dh..(h + 1) * s * dh;
            let (qh, kh, vh) = (&c.q[rng.clone()], &c.k[rng.clone()], &c.v[rng.clone()]);
            let ph = &c.probs[h * s * s..(h + 1) * s * s];
            let doh = &dattn_h[rng.clone()];
            gemm(s, s, dh, ph, true, doh, false, &mut dv[rng.clone()], 0.0);
            gemm(s, dh, s, doh, false, vh, true, &mut dscores, 0.0);
            for (drow, prow) in dscores.chunks_exact_mut(s).zip(ph.chunks_exact(s)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (d, p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            gemm(s, s, dh, &dscores, false, kh, false, &mut dq[rng.clone()], 0.0);
            gemm(s, s, dh, &dscores, true, qh, false, &mut dk[rng], 0.0);
        }
        let mut dh1 = vec![0.0; s * e];
        for (wn, bn, d) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
            let merged = merge_heads(d, s, heads, dh);
            let (gw, gb) = split2(grads, &name(wn), &name(bn));
            let part = linear_backward(&c.h1, s, e, p(wn), e, &merged, gw, gb);
            dh1.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
        }
        let dres = {
            let (gg, gb) = split2(grads, &name("ln1_g"), &name("ln1_b"));
            layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, s, e, p("ln1_g"), gg, gb)
        };
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
    }

    // Embeddings.
    let dimg = &dx[..ni * e];
    {
        let (gw, gb) = split2(grads, "patch_w", "patch_b");
        gemm(cfg.patch_dim(), ni, e, &input.patches, true, dimg, false, gw, 1.0);
        for row in dimg.chunks_exact(e) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    {
        let (gr, gc) = split2(grads, "pos_row", "pos_col");
        for t in 0..ni {
            let (rr, cc) = (t / g, t % g);
            for j in 0..e {
                gr[rr * e + j] += dimg[t * e + j];
                gc[cc * e + j] += dimg[t * e + j];
            }
        }
    }
    let dlang = &dx[ni * e..(ni + nl) * e];
    {
        let (gw, gb) = split2(grads, "lang_w", "lang_b");
        gemm(e, nl, e, &input.lang, true, dlang, false, gw, 1.0);
        for row in dlang.chunks_exact(e) {
            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    grads.get_mut("lang_pos").iter_mut().zip(dlang).for_each(|(a, b)| *a += b);
    grads.get_mut("depth_tokens").iter_mut().zip(&dx[(ni + nl) * e..]).for_each(|(a, b)| *a += b);
}

/// Disjoint mutable views of two tensors.
fn split2<'a>(p: &'a mut Params, a: &str, b: &str) -> (&'a mut [f64], &'a mut [f64]) {
    let (ta, tb) = (p.info(a).clone(), p.info(b).clone());
    assert!(ta.offset + ta.len() <= tb.offset, "{a} must precede {b}");
    let (lo, hi) = p.data.split_at_mut(tb.offset);
    (&mut lo[ta.offset..ta.offset + ta.len()], &mut hi[..tb.len()])
}
