use super::params::LayerParams;
use super::{build_mask, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::graph::{gelu, layer_norm_row};
use crate::numeric::{softmax_in_place, Scalar, Tensor};

/// Per-layer keys and values of every position encoded so far.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    len: usize,
    n_items: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of item positions at the front of the cache.
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn keys(&self, layer: usize) -> &Tensor<T> {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Tensor<T> {
        &self.values[layer]
    }
}

fn check_prefix(prefix: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::Length { len: 0, max: cfg.n_max });
    }
    if prefix.len() > cfg.n_max {
        return Err(Error::Length {
            len: prefix.len(),
            max: cfg.n_max,
        });
    }
    if let Some(&bad) = prefix.iter().find(|&&i| i >= cfg.num_items) {
        return Err(Error::Index {
            index: bad,
            catalog: cfg.num_items,
        });
    }
    Ok(())
}

fn input_rows<T: Scalar>(prefix: &[usize], extra: &[Vec<T>], params: &ModelParams<T>) -> Tensor<T> {
    let d = params.width();
    let mut x = Tensor::zeros(&[0, d]);
    for (pos, &item) in prefix.iter().enumerate() {
        let row: Vec<T> = params
            .item_emb
            .row_slice(item)
            .iter()
            .zip(params.item_pos.row_slice(pos))
            .map(|(&e, &p)| e + p)
            .collect();
        x.push_row(&row);
    }
    for row in extra {
        x.push_row(row);
    }
    x
}

fn project<T: Scalar>(a: &[T], w: &Tensor<T>) -> Vec<T> {
    let cols = w.cols();
    let mut out = vec![T::zero(); cols];
    for (p, &av) in a.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row_slice(p)) {
            *o += av * wv;
        }
    }
    out
}

/// Position-wise feed-forward residual update of one row.
fn ffn_residual<T: Scalar>(x: &mut [T], layer: &LayerParams<T>) {
    let f = layer_norm_row(x, layer.ln2_gamma.data(), layer.ln2_beta.data());
    let mut hidden = project(&f, &layer.w_ff1);
    for (h, &b) in hidden.iter_mut().zip(layer.b_ff1.data()) {
        *h = gelu(*h + b);
    }
    let out = project(&hidden, &layer.w_ff2);
    for ((xv, &o), &b) in x.iter_mut().zip(&out).zip(layer.b_ff2.data()) {
        *xv += o + b;
    }
}

struct DenseOutput<T> {
    hidden: Tensor<T>,
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    probs: Vec<Vec<Tensor<T>>>,
}

/// Full forward over `n` items plus explicit reasoning-position inputs,
/// using the dense additive mask.
fn dense_forward<T: Scalar>(
    prefix: &[usize],
    extra: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
    record_probs: bool,
) -> DenseOutput<T> {
    let mut x = input_rows(prefix, extra, params);
    let m = x.rows();
    let d = cfg.d;
    let dh = d / cfg.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mask = build_mask(cfg.mask_mode, prefix.len(), extra.len()).additive::<T>();
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut values = Vec::with_capacity(cfg.layers);
    let mut probs = Vec::new();
    for layer in &params.layers {
        let mut normed = Tensor::zeros(&[0, d]);
        for r in 0..m {
            normed.push_row(&layer_norm_row(x.row_slice(r), layer.ln1_gamma.data(), layer.ln1_beta.data()));
        }
        let q = normed.matmul(&layer.w_q);
        let k = normed.matmul(&layer.w_k);
        let v = normed.matmul(&layer.w_v);
        let mut attn = Tensor::zeros(&[m, d]);
        let mut layer_probs = Vec::new();
        for h in 0..cfg.heads {
            let span = h * dh..(h + 1) * dh;
            let mut p = Tensor::zeros(&[m, m]);
            for i in 0..m {
                let row = p.row_slice_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let qk = q.row_slice(i)[span.clone()]
                        .iter()
                        .zip(&k.row_slice(j)[span.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    *s = qk * scale + mask.get(i, j);
                }
                softmax_in_place(row);
            }
            for i in 0..m {
                for j in 0..m {
                    let pij = p.get(i, j);
                    for (o, &vv) in attn.row_slice_mut(i)[span.clone()].iter_mut().zip(&v.row_slice(j)[span.clone()]) {
                        *o += pij * vv;
                    }
                }
            }
            if record_probs {
                layer_probs.push(p);
            }
        }
        let out = attn.matmul(&layer.w_o);
        x.add_assign(&out);
        for r in 0..m {
            ffn_residual(x.row_slice_mut(r), layer);
        }
        keys.push(k);
        values.push(v);
        if record_probs {
            probs.push(layer_probs);
        }
    }
    DenseOutput {
        hidden: x,
        keys,
        values,
        probs,
    }
}

/// Final-layer states of `prefix` together with a cache holding its keys and values.
pub fn encode_sequence<T: Scalar>(
    prefix: &[usize],
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<(Tensor<T>, KvCache<T>)> {
    check_prefix(prefix, cfg)?;
    let out = dense_forward(prefix, &[], params, cfg, false);
    let cache = KvCache {
        keys: out.keys,
        values: out.values,
        len: prefix.len(),
        n_items: prefix.len(),
    };
    Ok((out.hidden, cache))
}

/// Full recomputation over items followed by explicit reasoning-position
/// inputs; returns all `n + k` final-layer states. No cache is involved.
pub fn encode_full<T: Scalar>(
    prefix: &[usize],
    reasoning_inputs: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<Tensor<T>> {
    check_prefix(prefix, cfg)?;
    if reasoning_inputs.len() > cfg.k_max {
        return Err(Error::Config(format!(
            "{} reasoning positions exceed k_max {}",
            reasoning_inputs.len(),
            cfg.k_max
        )));
    }
    Ok(dense_forward(prefix, reasoning_inputs, params, cfg, false).hidden)
}

/// Attention probabilities of the full forward, indexed `[layer][head]`, each `(n+k) x (n+k)`.
pub fn attention_probabilities<T: Scalar>(
    prefix: &[usize],
    reasoning_inputs: &[Vec<T>],
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<Vec<Vec<Tensor<T>>>> {
    check_prefix(prefix, cfg)?;
    Ok(dense_forward(prefix, reasoning_inputs, params, cfg, true).probs)
}

/// Runs one new reasoning position against the cache and appends its keys
/// and values. The new position attends to every cached position and itself.
pub fn incremental_step<T: Scalar>(
    input: &[T],
    cache: &mut KvCache<T>,
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<Vec<T>> {
    if cache.keys.len() != params.layers.len() {
        return Err(Error::State(format!(
            "cache has {} layers, model has {}",
            cache.keys.len(),
            params.layers.len()
        )));
    }
    if cache.n_items == 0 || cache.len < cache.n_items {
        return Err(Error::State("cache holds no encoded items".into()));
    }
    if cache.len >= cfg.n_max + cfg.k_max || cache.len - cache.n_items >= cfg.k_max {
        return Err(Error::State(format!(
            "cache length {} is already at the reasoning limit (k_max {})",
            cache.len, cfg.k_max
        )));
    }
    if cache.keys.iter().any(|k| k.rows() != cache.len) {
        return Err(Error::State("layer caches disagree on length".into()));
    }
    if input.len() != cfg.d {
        return Err(Error::State(format!("input width {} != {}", input.len(), cfg.d)));
    }
    let d = cfg.d;
    let dh = d / cfg.heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut x = input.to_vec();
    let mut scores = Vec::with_capacity(cache.len + 1);
    for (l, layer) in params.layers.iter().enumerate() {
        let a = layer_norm_row(&x, layer.ln1_gamma.data(), layer.ln1_beta.data());
        let q = project(&a, &layer.w_q);
        cache.keys[l].push_row(&project(&a, &layer.w_k));
        cache.values[l].push_row(&project(&a, &layer.w_v));
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let mut attn = vec![T::zero(); d];
        for h in 0..cfg.heads {
            let span = h * dh..(h + 1) * dh;
            scores.clear();
            for j in 0..keys.rows() {
                let s = q[span.clone()]
                    .iter()
                    .zip(&keys.row_slice(j)[span.clone()])
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
                scores.push(s * scale);
            }
            softmax_in_place(&mut scores);
            for (j, &p) in scores.iter().enumerate() {
                for (o, &v) in attn[span.clone()].iter_mut().zip(&values.row_slice(j)[span.clone()]) {
                    *o += p * v;
                }
            }
        }
        let out = project(&attn, &layer.w_o);
        for (xv, o) in x.iter_mut().zip(out) {
            *xv += o;
        }
        ffn_residual(&mut x, layer);
    }
    cache.len += 1;
    Ok(x)
}
