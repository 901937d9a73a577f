//! Recommendation losses: cross-entropy over the full catalog, the ensemble
//! objective with pairwise KL diversity, and the progressive objective with
//! temperature annealing and reasoning-aware contrastive learning.
//!
//! The functions in this module evaluate losses on plain vectors. The
//! differentiable versions used for training live in [`batch`].

pub mod batch;

pub use batch::ObjectiveConfig;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Scalar, Tensor};
use crate::reasoning::{user_representation, Strategy};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on the last reasoning state.
    Base,
    /// Mean-pooled cross-entropy plus pairwise KL diversity.
    Erl,
    /// Annealed per-step cross-entropy plus contrastive denoising.
    Prl,
}

impl Objective {
    /// Representation used at inference for models trained with this objective.
    pub fn inference_strategy(self) -> Strategy {
        match self {
            Objective::Erl => Strategy::MeanPool,
            Objective::Base | Objective::Prl => Strategy::LastStep,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Objective::Base),
            "erl" => Ok(Objective::Erl),
            "prl" => Ok(Objective::Prl),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Base => "base",
            Objective::Erl => "erl",
            Objective::Prl => "prl",
        })
    }
}

/// Loss value with its named parts; `total = sum(weights[name] * components[name])`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn push(&mut self, name: &str, value: f64, weight: f64) {
        self.components.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
        self.total = self.weighted_sum();
    }

    pub fn weighted_sum(&self) -> f64 {
        self.components.iter().map(|(k, v)| v * self.weights[k]).sum()
    }

    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// Per-step temperatures `tau_k = tau * alpha^(K - k)` for `k = 0..=K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub taus: Vec<f64>,
    pub base: f64,
    pub decay: f64,
}

pub fn pta_schedule(tau: f64, alpha: f64, k: usize) -> Result<TemperatureSchedule> {
    if !(tau > 0.0) {
        return Err(Error::arg(format!("base temperature must be positive, got {tau}")));
    }
    if !(alpha >= 1.0) {
        return Err(Error::arg(format!("decay rate must be at least 1, got {alpha}")));
    }
    let taus = (0..=k).map(|step| tau * alpha.powi((k - step) as i32)).collect();
    Ok(TemperatureSchedule {
        taus,
        base: tau,
        decay: alpha,
    })
}

/// `softmax(r . E^T / temperature)` over the full catalog.
pub fn score_distribution<T: Scalar>(r: &[T], item_emb: &Tensor<T>, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    let mut logits: Vec<f64> = (0..item_emb.rows())
        .map(|i| {
            r.iter()
                .zip(item_emb.row_slice(i))
                .map(|(&a, &b)| a.as_f64() * b.as_f64())
                .sum::<f64>()
                / temperature
        })
        .collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// `-ln probs[target]`, with the probability floored at [`PROB_FLOOR`].
pub fn rec_loss(probs: &[f64], target: usize) -> f64 {
    let p = probs[target];
    if p < PROB_FLOOR {
        log::warn!("target probability {p:e} clamped to {PROB_FLOOR:e}");
    }
    -p.max(PROB_FLOOR).ln()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

/// `-sum_{i<j} KL(y_i || y_j)` over the temperature-1 distributions of every state pair.
pub fn kl_regularizer<T: Scalar>(states: &[Vec<T>], item_emb: &Tensor<T>) -> Result<f64> {
    if states.len() < 2 {
        log::warn!("KL regularizer needs at least two reasoning states; returning 0");
        return Ok(0.0);
    }
    let dists = states
        .iter()
        .map(|r| score_distribution(r, item_emb, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += kl(&dists[i], &dists[j]);
        }
    }
    Ok(-total)
}

/// Mean-pooled cross-entropy plus `lambda` times the KL regularizer.
pub fn erl_loss<T: Scalar>(states: &[Vec<T>], item_emb: &Tensor<T>, target: usize, lambda: f64) -> Result<LossBreakdown> {
    let pooled = user_representation(states, Strategy::MeanPool);
    let rec = rec_loss(&score_distribution(&pooled, item_emb, 1.0)?, target);
    let mut out = LossBreakdown::default();
    out.push("rec", rec, 1.0);
    let kl = if states.len() > 1 {
        kl_regularizer(states, item_emb)?
    } else {
        0.0
    };
    out.push("kl", kl, lambda);
    Ok(out)
}

/// Sum over steps of the cross-entropy at each step's temperature.
pub fn prl_rec_loss<T: Scalar>(
    states: &[Vec<T>],
    item_emb: &Tensor<T>,
    target: usize,
    schedule: &TemperatureSchedule,
) -> Result<f64> {
    if states.len() != schedule.taus.len() {
        return Err(Error::arg(format!(
            "{} states but {} temperatures",
            states.len(),
            schedule.taus.len()
        )));
    }
    states.iter().zip(&schedule.taus).try_fold(0.0, |acc, (r, &tau)| {
        Ok(acc + rec_loss(&score_distribution(r, item_emb, tau)?, target))
    })
}

/// `x + eps` with `eps ~ Normal(0, gamma I)` (`gamma` is the variance).
pub fn noise_inject<T: Scalar, R: Rng + ?Sized>(x: &[T], gamma: f64, rng: &mut R) -> Vec<T> {
    if gamma == 0.0 {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, gamma.sqrt()).expect("non-negative variance");
    x.iter().map(|&v| v + T::of(normal.sample(rng))).collect()
}

/// InfoNCE between noised and clean reasoning states with in-batch negatives.
///
/// `clean[b]` holds `[r_0, ..., r_K]` for sequence `b` and `noisy[b]` holds
/// `[r~_1, ..., r~_K]`. The loss is summed over steps and averaged over the batch.
pub fn rcl_loss<T: Scalar>(clean: &[Vec<Vec<T>>], noisy: &[Vec<Vec<T>>], tau_c: f64) -> Result<f64> {
    if !(tau_c > 0.0) {
        return Err(Error::arg(format!("contrastive temperature must be positive, got {tau_c}")));
    }
    let bsz = clean.len();
    if bsz == 0 || noisy.len() != bsz {
        return Err(Error::arg("clean and noised batches must be the same nonempty size"));
    }
    let k = noisy[0].len();
    if k == 0 {
        log::warn!("contrastive loss with zero reasoning steps; returning 0");
        return Ok(0.0);
    }
    let sim = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum::<f64>() / tau_c;
    let mut total = 0.0;
    for step in 1..=k {
        for b in 0..bsz {
            let anchor = &noisy[b][step - 1];
            let mut logits: Vec<f64> = (0..bsz).map(|o| sim(anchor, &clean[o][step])).collect();
            softmax_in_place(&mut logits);
            total -= logits[b].max(PROB_FLOOR).ln();
        }
    }
    Ok(total / bsz as f64)
}
