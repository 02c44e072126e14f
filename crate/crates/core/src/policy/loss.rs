//! Six-term training objective and its gradient with respect to the logits.

use serde::{Deserialize, Serialize};

use super::ops::{log_sum_exp, softmax_inplace};
use crate::codec::{EncodedActionTarget, PolicyOutputs, ROT_BINS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub trans: f64,
    pub rot: f64,
    pub open: f64,
    pub collision: f64,
    pub depth: f64,
    pub dyn_inf: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.trans + self.rot + self.open + self.collision + self.depth + self.dyn_inf
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.trans, self.rot, self.open, self.collision, self.depth, self.dyn_inf]
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, w: f64) {
        self.trans += w * o.trans;
        self.rot += w * o.rot;
        self.open += w * o.open;
        self.collision += w * o.collision;
        self.depth += w * o.depth;
        self.dyn_inf += w * o.dyn_inf;
    }
}

/// Cross-entropy of `logits` against class `k`, and its gradient.
fn ce_index(logits: &[f64], k: usize) -> (f64, Vec<f64>) {
    let loss = log_sum_exp(logits) - logits[k];
    let mut g = logits.to_vec();
    softmax_inplace(&mut g);
    g[k] -= 1.0;
    (loss, g)
}

/// `KL(target ‖ softmax(logits))`. Equal to the cross-entropy minus the
/// target's entropy, so it has the same gradient and reaches zero when the
/// prediction matches a soft target.
fn kl_soft(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut loss = 0.0;
    for (z, t) in logits.iter().zip(target) {
        if *t > 0.0 {
            loss += t * (t.ln() - (z - lse));
        }
    }
    let mut g = logits.to_vec();
    softmax_inplace(&mut g);
    for (gi, t) in g.iter_mut().zip(target) {
        *gi -= t;
    }
    (loss, g)
}

/// Loss terms and the gradient of their sum with respect to every logit.
pub fn loss_and_grad(out: &PolicyOutputs, target: &EncodedActionTarget) -> (LossBreakdown, PolicyOutputs) {
    assert_eq!(out.resolution, target.resolution, "outputs and target disagree on resolution");
    let mut grad = PolicyOutputs::zeros(out.resolution);
    let (trans, g) = kl_soft(&out.heatmap_logits, &target.heatmap);
    grad.heatmap_logits = g;
    let (depth, g) = ce_index(&out.depth_logits, target.depth_bin);
    grad.depth_logits = g;
    let mut rot = 0.0;
    for axis in 0..3 {
        let (l, g) = ce_index(out.rot_axis(axis), target.rot_bins[axis]);
        rot += l;
        grad.rot_logits[axis * ROT_BINS..(axis + 1) * ROT_BINS].copy_from_slice(&g);
    }
    let pair = |logits: &[f64; 2], k: usize| {
        let (l, g) = ce_index(logits, k);
        (l, [g[0], g[1]])
    };
    let (open, g) = pair(&out.open_logits, target.open_index());
    grad.open_logits = g;
    let (collision, g) = pair(&out.collision_logits, target.collision_index());
    grad.collision_logits = g;
    let (dyn_inf, g) = pair(&out.refine_logits, target.refine_index());
    grad.refine_logits = g;
    (LossBreakdown { trans, rot, open, collision, depth, dyn_inf }, grad)
}

pub fn loss(out: &PolicyOutputs, target: &EncodedActionTarget) -> LossBreakdown {
    loss_and_grad(out, target).0
}

/// Scales every logit gradient by `w`.
pub fn scale_outputs(o: &mut PolicyOutputs, w: f64) {
    for v in o
        .heatmap_logits
        .iter_mut()
        .chain(o.depth_logits.iter_mut())
        .chain(o.rot_logits.iter_mut())
        .chain(o.open_logits.iter_mut())
        .chain(o.collision_logits.iter_mut())
        .chain(o.refine_logits.iter_mut())
    {
        *v *= w;
    }
}
