//! Autoregressive latent reasoning over the encoder.
//!
//! After the item prefix is encoded, the final-layer state of the last
//! position is fed back as the next input, offset by a learned reasoning
//! position embedding, `K` times. Each pass costs one cached single-row
//! forward instead of a re-encode.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode_full, encode_sequence, incremental_step, EncoderConfig, KvCache, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Scalar;

/// Final-layer states `[r_0, ..., r_K]` and the cache that produced them.
#[derive(Clone, Debug)]
pub struct ReasoningStates<T> {
    pub states: Vec<Vec<T>>,
    pub cache: Option<KvCache<T>>,
}

impl<T: Scalar> ReasoningStates<T> {
    pub fn from_states(states: Vec<Vec<T>>) -> Self {
        assert!(!states.is_empty(), "reasoning states need r_0");
        Self { states, cache: None }
    }

    /// Number of reasoning steps `K`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// View of the first `k + 1` states, as if reasoning had stopped at step `k`.
    pub fn truncated(&self, k: usize) -> &[Vec<T>] {
        &self.states[..=k]
    }
}

/// How the reasoning states collapse into a single user vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LastStep,
    MeanPool,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" | "last_step" => Ok(Strategy::LastStep),
            "mean" | "mean_pool" => Ok(Strategy::MeanPool),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

fn check_steps(k: usize, cfg: &EncoderConfig) -> Result<()> {
    if k > cfg.k_max {
        return Err(Error::Config(format!("{k} reasoning steps exceed k_max {}", cfg.k_max)));
    }
    Ok(())
}

fn step_input<T: Scalar>(prev: &[T], params: &ModelParams<T>, step: usize) -> Vec<T> {
    prev.iter()
        .zip(params.reason_pos.row_slice(step - 1))
        .map(|(&r, &p)| r + p)
        .collect()
}

/// Encodes `prefix` and runs `k` cached reasoning steps.
pub fn reason<T: Scalar>(
    prefix: &[usize],
    k: usize,
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<ReasoningStates<T>> {
    check_steps(k, cfg)?;
    let (hidden, mut cache) = encode_sequence(prefix, params, cfg)?;
    let mut states = Vec::with_capacity(k + 1);
    states.push(hidden.row_slice(prefix.len() - 1).to_vec());
    for i in 1..=k {
        let input = step_input(&states[i - 1], params, i);
        states.push(incremental_step(&input, &mut cache, params, cfg)?);
    }
    Ok(ReasoningStates {
        states,
        cache: Some(cache),
    })
}

/// Same states as [`reason`], recomputing the full `n + i` sequence at every step.
pub fn reason_uncached<T: Scalar>(
    prefix: &[usize],
    k: usize,
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<ReasoningStates<T>> {
    check_steps(k, cfg)?;
    let n = prefix.len();
    let hidden = encode_full(prefix, &[], params, cfg)?;
    let mut states = vec![hidden.row_slice(n - 1).to_vec()];
    let mut inputs = Vec::with_capacity(k);
    for i in 1..=k {
        inputs.push(step_input(&states[i - 1], params, i));
        let hidden = encode_full(prefix, &inputs, params, cfg)?;
        states.push(hidden.row_slice(n + i - 1).to_vec());
    }
    Ok(ReasoningStates { states, cache: None })
}

/// Collapses `states` (typically a [`ReasoningStates::truncated`] view).
pub fn user_representation<T: Scalar>(states: &[Vec<T>], strategy: Strategy) -> Vec<T> {
    assert!(!states.is_empty(), "no reasoning states");
    match strategy {
        Strategy::LastStep => states[states.len() - 1].clone(),
        Strategy::MeanPool => {
            let n = T::of(states.len() as f64);
            let mut out = vec![T::zero(); states[0].len()];
            for s in states {
                for (o, &v) in out.iter_mut().zip(s) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o = *o / n);
            out
        }
    }
}
