//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rearec::encoder::{EncoderConfig, MaskMode};
use rearec::training::init_params;
use rearec::ModelParams;

/// Randomly initialised model with the given shape.
pub fn model(num_items: usize, d: usize, layers: usize, heads: usize, n_max: usize, k_max: usize) -> (ModelParams<f32>, EncoderConfig) {
    let cfg = EncoderConfig {
        num_items,
        d,
        layers,
        heads,
        n_max,
        k_max,
        mask_mode: MaskMode::Causal,
        dropout: 0.0,
    };
    let params = init_params(&cfg, 0).expect("valid config");
    (params, cfg)
}

/// Uniform random prefix of `len` item indices.
pub fn prefix(num_items: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..num_items)).collect()
}
