//! Synthetic regime-switching sequences with known structure.
//!
//! Each user walks through items under a hidden regime. Within a regime the
//! next item is a fixed function of the last item, chosen from two tables by
//! the parity of the item before it. Regimes are sticky and switch rarely, and
//! a fraction of steps is replaced with uniform noise.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transitions {
    /// Random permutation tables per regime.
    Random,
    /// `next = prev + stride` with a regime- and parity-dependent stride.
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub regimes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub switch_prob: f64,
    pub transitions: Transitions,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 200,
            regimes: 4,
            min_len: 10,
            max_len: 30,
            noise: 0.1,
            switch_prob: 0.1,
            transitions: Transitions::Random,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items < 2 || self.regimes == 0 {
            return Err(Error::arg("synthetic data needs users, at least 2 items and a regime"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::arg("sequence lengths must satisfy 2 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::arg("noise and switch_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generates a log with ids `u00000..` and `i00000..`, so sorted id order
/// matches generation order. Each user's events span the same time range,
/// which makes timestamp quantiles act like a per-user tail holdout.
pub fn synth_sequences(cfg: &SynthConfig) -> Result<InteractionLog> {
    cfg.validate()?;
    let n = cfg.num_items;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tables: Vec<[Vec<usize>; 2]> = (0..cfg.regimes)
        .map(|r| match cfg.transitions {
            Transitions::Random => {
                let mut a: Vec<usize> = (0..n).collect();
                let mut b = a.clone();
                a.shuffle(&mut rng);
                b.shuffle(&mut rng);
                [a, b]
            }
            Transitions::Cycle => {
                let stride = |s: usize| (0..n).map(|i| (i + s) % n).collect::<Vec<_>>();
                [stride(1 + 2 * r), stride(2 + 2 * r)]
            }
        })
        .collect();

    let width = format!("{}", cfg.num_users.max(n)).len().max(5);
    let mut events = Vec::new();
    for u in 0..cfg.num_users {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut regime = rng.random_range(0..cfg.regimes);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        seq.push(rng.random_range(0..n));
        while seq.len() < len {
            if rng.random::<f64>() < cfg.switch_prob {
                regime = rng.random_range(0..cfg.regimes);
            }
            let next = if rng.random::<f64>() < cfg.noise {
                rng.random_range(0..n)
            } else {
                let prev = seq[seq.len() - 1];
                let parity = if seq.len() >= 2 { seq[seq.len() - 2] % 2 } else { 0 };
                tables[regime][parity][prev]
            };
            seq.push(next);
        }
        for (j, &item) in seq.iter().enumerate() {
            let frac = (j + 1) as f64 / len as f64;
            events.push(Interaction {
                user: format!("u{u:0width$}"),
                item: format!("i{item:0width$}"),
                rating: 5.0,
                timestamp: (frac * 1e6).round() as i64 * 10_000 + u as i64,
            });
        }
    }
    Ok(InteractionLog::new(events))
}
