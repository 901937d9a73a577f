//! Batch losses recorded on a [`Graph`] so they can be differentiated.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{pta_schedule, LossBreakdown, Objective, PROB_FLOOR};
use crate::encoder::tape::{forward_batch, Dropout, ParamVars};
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Scalar, Tensor, Var};

/// Hyperparameters of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    /// Reasoning steps during training.
    pub k: usize,
    /// KL weight (ERL).
    pub lambda: f64,
    /// Base temperature (PRL).
    pub tau: f64,
    /// Temperature decay rate (PRL).
    pub alpha: f64,
    /// Noise variance (PRL).
    pub gamma: f64,
    /// Contrastive temperature (PRL).
    pub tau_c: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Base,
            k: 0,
            lambda: 0.01,
            tau: 1.0,
            alpha: 1.0,
            gamma: 0.01,
            tau_c: 1.0,
        }
    }
}

/// Loss nodes of one batch.
pub struct BatchLoss {
    pub total: Var,
    /// `(name, node, weight)`; `total` is the weighted sum.
    pub components: Vec<(&'static str, Var, f64)>,
}

impl BatchLoss {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let mut out = LossBreakdown::default();
        for (name, v, w) in &self.components {
            out.push(name, g.scalar(*v).as_f64(), *w);
        }
        out.total = g.scalar(self.total).as_f64();
        out
    }
}

/// Batch-mean cross-entropy of `softmax(reps . E^T / temperature)` at `targets`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, reps: Var, item_emb: Var, targets: &[usize], temperature: f64) -> Var {
    let mut logits = g.matmul_t(reps, item_emb);
    if temperature != 1.0 {
        logits = g.scale(logits, T::of(1.0 / temperature));
    }
    let probs = g.softmax_rows(logits, None);
    let picked = g.pick_per_row(probs, targets);
    let logp = g.log(picked, T::of(PROB_FLOOR));
    let mean = g.mean_axis(logp, 0);
    g.scale(mean, -T::one())
}

/// Batch mean of `-sum_{i<j} KL(y_i || y_j)` at temperature 1.
pub fn kl_regularizer<T: Scalar>(g: &mut Graph<T>, states: &[Var], item_emb: Var) -> Option<Var> {
    if states.len() < 2 {
        return None;
    }
    let mut probs = Vec::with_capacity(states.len());
    let mut logps = Vec::with_capacity(states.len());
    for &r in states {
        let logits = g.matmul_t(r, item_emb);
        let p = g.softmax_rows(logits, None);
        logps.push(g.log(p, T::of(PROB_FLOOR)));
        probs.push(p);
    }
    let mut total: Option<Var> = None;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let diff = g.sub(logps[i], logps[j]);
            let per_row = g.row_dot(probs[i], diff);
            total = Some(match total {
                Some(t) => g.add(t, per_row),
                None => per_row,
            });
        }
    }
    let mean = g.mean_axis(total.expect("at least one pair"), 0);
    Some(g.scale(mean, -T::one()))
}

/// InfoNCE over the batch for each step, summed over steps; anchors are
/// `noisy[k - 1]`, positives the matching rows of `clean[k]`, negatives the
/// other rows.
pub fn rcl_loss<T: Scalar>(g: &mut Graph<T>, clean: &[Var], noisy: &[Var], tau_c: f64) -> Option<Var> {
    if noisy.is_empty() {
        return None;
    }
    let bsz = g.value(noisy[0]).rows();
    let diag: Vec<usize> = (0..bsz).collect();
    let mut total: Option<Var> = None;
    for (k, &anchor) in noisy.iter().enumerate() {
        let mut sims = g.matmul_t(anchor, clean[k + 1]);
        if tau_c != 1.0 {
            sims = g.scale(sims, T::of(1.0 / tau_c));
        }
        let p = g.softmax_rows(sims, None);
        let pos = g.pick_per_row(p, &diag);
        let logp = g.log(pos, T::of(PROB_FLOOR));
        let mean = g.mean_axis(logp, 0);
        let step = g.scale(mean, -T::one());
        total = Some(match total {
            Some(t) => g.add(t, step),
            None => step,
        });
    }
    total
}

/// Noise tensors `eps_i ~ Normal(0, gamma I)`, one `B x d` tensor per step.
pub fn draw_noise<T: Scalar>(k: usize, batch: usize, d: usize, gamma: f64, rng: &mut dyn RngCore) -> Vec<Tensor<T>> {
    (0..k)
        .map(|_| {
            if gamma == 0.0 {
                Tensor::zeros(&[batch, d])
            } else {
                Tensor::randn(&[batch, d], gamma.sqrt(), rng)
            }
        })
        .collect()
}

/// Records the configured objective for a batch of `(prefix, target)` pairs.
///
/// `noise_rng` feeds the contrastive noise; `dropout` is `None` at evaluation.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    ecfg: &EncoderConfig,
    ocfg: &ObjectiveConfig,
    prefixes: &[&[usize]],
    targets: &[usize],
    noise_rng: &mut dyn RngCore,
    dropout: Option<Dropout<'_>>,
) -> Result<BatchLoss> {
    if prefixes.is_empty() || prefixes.len() != targets.len() {
        return Err(Error::arg("batch needs matching nonempty prefixes and targets"));
    }
    if ocfg.k > ecfg.k_max {
        return Err(Error::Config(format!("k {} exceeds k_max {}", ocfg.k, ecfg.k_max)));
    }
    let k = ocfg.k;
    let mut components = Vec::new();
    let total = match ocfg.objective {
        Objective::Base => {
            let states = forward_batch(g, pv, ecfg, prefixes, k, None, dropout);
            let rec = cross_entropy(g, states.clean[k], pv.item_emb, targets, 1.0);
            components.push(("rec", rec, 1.0));
            rec
        }
        Objective::Erl => {
            let states = forward_batch(g, pv, ecfg, prefixes, k, None, dropout);
            let sum = (1..=k).fold(states.clean[0], |acc, i| g.add(acc, states.clean[i]));
            let mean = g.scale(sum, T::of(1.0 / (k + 1) as f64));
            let rec = cross_entropy(g, mean, pv.item_emb, targets, 1.0);
            components.push(("rec", rec, 1.0));
            match kl_regularizer(g, &states.clean, pv.item_emb) {
                Some(kl) => {
                    components.push(("kl", kl, ocfg.lambda));
                    let weighted = g.scale(kl, T::of(ocfg.lambda));
                    g.add(rec, weighted)
                }
                None => rec,
            }
        }
        Objective::Prl => {
            let schedule = pta_schedule(ocfg.tau, ocfg.alpha, k)?;
            if !(ocfg.tau_c > 0.0) || !(ocfg.gamma >= 0.0) {
                return Err(Error::arg("tau_c must be positive and gamma non-negative"));
            }
            let noise = draw_noise::<T>(k, prefixes.len(), ecfg.d, ocfg.gamma, noise_rng);
            let states = forward_batch(g, pv, ecfg, prefixes, k, Some(&noise), dropout);
            let mut rec: Option<Var> = None;
            for (step, &tau) in schedule.taus.iter().enumerate() {
                let ce = cross_entropy(g, states.clean[step], pv.item_emb, targets, tau);
                rec = Some(match rec {
                    Some(r) => g.add(r, ce),
                    None => ce,
                });
            }
            let rec = rec.expect("schedule has at least one step");
            components.push(("rec", rec, 1.0));
            match rcl_loss(g, &states.clean, &states.noisy, ocfg.tau_c) {
                Some(rcl) => {
                    components.push(("rcl", rcl, 1.0));
                    g.add(rec, rcl)
                }
                None => rec,
            }
        }
    };
    Ok(BatchLoss { total, components })
}

/// Evaluates the objective on a batch without recording gradients for later use.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    ecfg: &EncoderConfig,
    ocfg: &ObjectiveConfig,
    prefixes: &[&[usize]],
    targets: &[usize],
    noise_rng: &mut dyn RngCore,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let pv = ParamVars::register(&mut g, params);
    let loss = batch_loss(&mut g, &pv, ecfg, ocfg, prefixes, targets, noise_rng, None)?;
    Ok(loss.breakdown(&g))
}

/// The progressive objective for a batch, as a loss breakdown.
pub fn prl_loss<T: Scalar>(
    params: &ModelParams<T>,
    ecfg: &EncoderConfig,
    ocfg: &ObjectiveConfig,
    prefixes: &[&[usize]],
    targets: &[usize],
    noise_rng: &mut dyn RngCore,
) -> Result<LossBreakdown> {
    let ocfg = ObjectiveConfig {
        objective: Objective::Prl,
        ..ocfg.clone()
    };
    evaluate_loss(params, ecfg, &ocfg, prefixes, targets, noise_rng)
}
