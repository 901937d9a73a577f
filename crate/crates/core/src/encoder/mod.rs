//! Transformer sequence encoder.
//!
//! Two forward implementations live here. [`forward`] is the inference path on
//! plain tensors with a key/value cache; [`tape`] records the same computation
//! on a [`Graph`](crate::numeric::Graph) for training, batching the row-wise
//! work of many variable-length sequences into shared matrix products.
//! Blocks are pre-layer-norm: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`,
//! with no final normalization so a zero-layer stack is the identity.

mod forward;
mod params;
pub mod tape;

use serde::{Deserialize, Serialize};

pub use forward::{attention_probabilities, encode_full, encode_sequence, incremental_step, KvCache};
pub use params::{LayerParams, ModelParams};

use crate::error::{Error, Result};

/// How item positions attend to each other. Reasoning positions always
/// attend to every item and to reasoning positions up to themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    PrefixBidirectional,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "prefix" | "prefix_bidirectional" => Ok(MaskMode::PrefixBidirectional),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Causal => "causal",
            MaskMode::PrefixBidirectional => "prefix_bidirectional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Catalog size.
    pub num_items: usize,
    /// Model width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum number of item positions.
    pub n_max: usize,
    /// Maximum number of reasoning positions.
    pub k_max: usize,
    pub mask_mode: MaskMode,
    /// Training-time dropout probability; evaluation never drops.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn d_ff(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if self.num_items == 0 {
            return Err(Error::Config("catalog is empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Boolean allow-matrix over `n` item positions followed by `k` reasoning positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Whether position `i` may attend to position `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size + j]
    }

    /// Additive form: 0 where allowed, a large negative value elsewhere.
    pub fn additive<T: crate::numeric::Scalar>(&self) -> crate::numeric::Tensor<T> {
        let data = self
            .allow
            .iter()
            .map(|&a| if a { T::zero() } else { T::of(crate::numeric::MASK_VALUE) })
            .collect();
        crate::numeric::Tensor::from_vec(vec![self.size, self.size], data)
    }
}

pub fn build_mask(mode: MaskMode, n: usize, k: usize) -> AttentionMask {
    let size = n + k;
    let mut allow = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            allow[i * size + j] = if i < n && mode == MaskMode::PrefixBidirectional {
                j < n
            } else {
                j <= i
            };
        }
    }
    AttentionMask { size, allow }
}
