use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

const LAYER_FIELDS: [&str; 12] = [
    "ln1_gamma",
    "ln1_beta",
    "w_q",
    "w_k",
    "w_v",
    "w_o",
    "ln2_gamma",
    "ln2_beta",
    "w_ff1",
    "b_ff1",
    "w_ff2",
    "b_ff2",
];

impl<T: Scalar> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }

    fn shapes(cfg: &EncoderConfig) -> [Vec<usize>; 12] {
        let (d, f) = (cfg.d, cfg.d_ff());
        [
            vec![1, d],
            vec![1, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![1, d],
            vec![1, d],
            vec![d, f],
            vec![1, f],
            vec![f, d],
            vec![1, d],
        ]
    }
}

/// All trainable tensors of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// Item embeddings, `N x d`; also the output scoring table.
    pub item_emb: Tensor<T>,
    /// Absolute item position embeddings, `n_max x d`.
    pub item_pos: Tensor<T>,
    /// Reasoning position embeddings, `k_max x d`; row `i - 1` feeds step `i`.
    pub reason_pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, std) embeddings and projections, identity layer norms, zero biases.
    pub fn init_with_std(cfg: &EncoderConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let item_emb = Tensor::randn(&[cfg.num_items, d], std, &mut rng);
        let item_pos = Tensor::randn(&[cfg.n_max, d], std, &mut rng);
        let reason_pos = Tensor::randn(&[cfg.k_max, d], std, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| {
                let f = cfg.d_ff();
                LayerParams {
                    ln1_gamma: Tensor::full(&[1, d], T::one()),
                    ln1_beta: Tensor::zeros(&[1, d]),
                    w_q: Tensor::randn(&[d, d], std, &mut rng),
                    w_k: Tensor::randn(&[d, d], std, &mut rng),
                    w_v: Tensor::randn(&[d, d], std, &mut rng),
                    w_o: Tensor::randn(&[d, d], std, &mut rng),
                    ln2_gamma: Tensor::full(&[1, d], T::one()),
                    ln2_beta: Tensor::zeros(&[1, d]),
                    w_ff1: Tensor::randn(&[d, f], std, &mut rng),
                    b_ff1: Tensor::zeros(&[1, f]),
                    w_ff2: Tensor::randn(&[f, d], std, &mut rng),
                    b_ff2: Tensor::zeros(&[1, d]),
                }
            })
            .collect();
        Ok(Self {
            item_emb,
            item_pos,
            reason_pos,
            layers,
        })
    }

    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(cfg, seed, INIT_STD)
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn width(&self) -> usize {
        self.item_emb.cols()
    }

    /// Stable `(name, tensor)` listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("item_pos".to_string(), &self.item_pos),
            ("reason_pos".to_string(), &self.reason_pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.item_emb, &mut self.item_pos, &mut self.reason_pos];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out
    }

    /// Rebuilds parameters from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &EncoderConfig, mut tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let d = cfg.d;
        let item_emb = take("item_emb", &[cfg.num_items, d])?;
        let item_pos = take("item_pos", &[cfg.n_max, d])?;
        let reason_pos = take("reason_pos", &[cfg.k_max, d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let shapes = LayerParams::<T>::shapes(cfg);
            let mut get = |i: usize| take(&format!("layers.{l}.{}", LAYER_FIELDS[i]), &shapes[i]);
            layers.push(LayerParams {
                ln1_gamma: get(0)?,
                ln1_beta: get(1)?,
                w_q: get(2)?,
                w_k: get(3)?,
                w_v: get(4)?,
                w_o: get(5)?,
                ln2_gamma: get(6)?,
                ln2_beta: get(7)?,
                w_ff1: get(8)?,
                b_ff1: get(9)?,
                w_ff2: get(10)?,
                b_ff2: get(11)?,
            });
        }
        if let Some((name, _)) = tensors.first() {
            return Err(Error::Format(format!("unexpected tensor `{name}`")));
        }
        Ok(Self {
            item_emb,
            item_pos,
            reason_pos,
            layers,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            item_emb: self.item_emb.cast(),
            item_pos: self.item_pos.cast(),
            reason_pos: self.reason_pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w_ff1: l.w_ff1.cast(),
                    b_ff1: l.b_ff1.cast(),
                    w_ff2: l.w_ff2.cast(),
                    b_ff2: l.b_ff2.cast(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}
