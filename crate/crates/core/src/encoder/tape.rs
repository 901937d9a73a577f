//! Differentiable batched forward pass.
//!
//! Item rows of every sequence in a batch are stacked into one matrix so the
//! projections, layer norms and feed-forward layers run as single products;
//! only attention is per sequence, expressed through a sparse
//! [`AttentionLayout`]. Reasoning steps are run one at a time for the whole
//! batch against the keys and values recorded so far, which is the
//! differentiable counterpart of the inference cache.

use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{EncoderConfig, MaskMode, ModelParams};
use crate::numeric::{AttentionLayout, Gradients, Graph, Scalar, Tensor, Var};

pub struct LayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    w_ff1: Var,
    b_ff1: Var,
    w_ff2: Var,
    b_ff2: Var,
}

/// Leaf handles for every tensor of a [`ModelParams`], in `named()` order.
pub struct ParamVars {
    pub item_emb: Var,
    pub item_pos: Var,
    pub reason_pos: Var,
    layers: Vec<LayerVars>,
    all: Vec<Var>,
}

impl ParamVars {
    pub fn register<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        let all: Vec<Var> = params.named().into_iter().map(|(_, t)| g.leaf(t.clone())).collect();
        Self::from_leaves(all)
    }

    /// Wraps leaves created elsewhere (for example by the gradient checker).
    pub fn from_leaves(all: Vec<Var>) -> Self {
        let layers = all[3..]
            .chunks(12)
            .map(|c| LayerVars {
                ln1_gamma: c[0],
                ln1_beta: c[1],
                w_q: c[2],
                w_k: c[3],
                w_v: c[4],
                w_o: c[5],
                ln2_gamma: c[6],
                ln2_beta: c[7],
                w_ff1: c[8],
                b_ff1: c[9],
                w_ff2: c[10],
                b_ff2: c[11],
            })
            .collect();
        Self {
            item_emb: all[0],
            item_pos: all[1],
            reason_pos: all[2],
            layers,
            all,
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.all
    }

    /// Gradients laid out like `params`; untouched tensors get zeros.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut Gradients<T>, params: &ModelParams<T>) -> Vec<Tensor<T>> {
        self.all
            .iter()
            .zip(params.named())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Training-time dropout source.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let scale = T::of(1.0 / keep);
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        g.dropout_with_mask(x, mask)
    }
}

fn maybe_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// Reasoning states of a batch, one `B x d` node per step.
pub struct BatchStates {
    /// `[r_0, ..., r_K]`.
    pub clean: Vec<Var>,
    /// `[r~_1, ..., r~_K]` from the noise-perturbed pass; empty when no noise was given.
    pub noisy: Vec<Var>,
}

struct Segments {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    total: usize,
}

impl Segments {
    fn new(prefixes: &[&[usize]]) -> Self {
        let mut offsets = Vec::with_capacity(prefixes.len());
        let mut total = 0;
        for p in prefixes {
            offsets.push(total);
            total += p.len();
        }
        Self {
            offsets,
            lens: prefixes.iter().map(|p| p.len()).collect(),
            total,
        }
    }

    fn items(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b] + self.lens[b]
    }

    fn batch(&self) -> usize {
        self.lens.len()
    }
}

fn item_layout(seg: &Segments, mode: MaskMode, heads: usize) -> AttentionLayout {
    let mut allowed = Vec::with_capacity(seg.total);
    for b in 0..seg.batch() {
        let items = seg.items(b);
        for i in items.clone() {
            allowed.push(match mode {
                MaskMode::Causal => (items.start..=i).collect(),
                MaskMode::PrefixBidirectional => items.clone().collect(),
            });
        }
    }
    AttentionLayout { heads, allowed }
}

/// Layout for reasoning rows stacked step-major (`(i - 1) * B + b`) after the
/// item rows; a query at step `i` sees its own items and its own rows at
/// steps `1..=i`.
fn reasoning_layout(seg: &Segments, steps: std::ops::RangeInclusive<usize>, heads: usize) -> AttentionLayout {
    let bsz = seg.batch();
    let mut allowed = Vec::new();
    for i in steps {
        for b in 0..bsz {
            let mut a: Vec<usize> = seg.items(b).collect();
            a.extend((1..=i).map(|j| seg.total + (j - 1) * bsz + b));
            allowed.push(a);
        }
    }
    AttentionLayout { heads, allowed }
}

/// One pre-norm block over `x`; the attention keys and values are the rows of
/// `key_parts`/`value_parts` followed by the new rows computed from `x`.
#[allow(clippy::too_many_arguments)]
fn block<T: Scalar>(
    g: &mut Graph<T>,
    lv: &LayerVars,
    x: Var,
    key_parts: &[Var],
    value_parts: &[Var],
    layout: Arc<AttentionLayout>,
    dropout: &mut Option<Dropout<'_>>,
) -> (Var, Var, Var) {
    let a = g.layer_norm(x, lv.ln1_gamma, lv.ln1_beta);
    let q = g.matmul(a, lv.w_q);
    let k_new = g.matmul(a, lv.w_k);
    let v_new = g.matmul(a, lv.w_v);
    let (keys, values) = if key_parts.is_empty() {
        (k_new, v_new)
    } else {
        let mut kp = key_parts.to_vec();
        kp.push(k_new);
        let mut vp = value_parts.to_vec();
        vp.push(v_new);
        (g.concat_rows(&kp), g.concat_rows(&vp))
    };
    let attn = g.attention(q, keys, values, layout);
    let o = g.matmul(attn, lv.w_o);
    let o = maybe_dropout(g, o, dropout);
    let h = g.add(x, o);
    let f = g.layer_norm(h, lv.ln2_gamma, lv.ln2_beta);
    let f = g.matmul(f, lv.w_ff1);
    let f = g.add_row(f, lv.b_ff1);
    let f = g.gelu(f);
    let f = g.matmul(f, lv.w_ff2);
    let f = g.add_row(f, lv.b_ff2);
    let f = maybe_dropout(g, f, dropout);
    (g.add(h, f), k_new, v_new)
}

/// Encodes a batch of prefixes and runs `k` reasoning steps.
///
/// With `noise = Some(eps)` (`k` tensors of shape `B x d`), a second pass
/// feeds `r_{i-1} + P_R[i-1] + eps_i` at every reasoning position, shares
/// the clean item keys and values, and returns its final-layer states in
/// [`BatchStates::noisy`].
pub fn forward_batch<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &EncoderConfig,
    prefixes: &[&[usize]],
    k: usize,
    noise: Option<&[Tensor<T>]>,
    mut dropout: Option<Dropout<'_>>,
) -> BatchStates {
    assert!(k <= cfg.k_max, "k {k} exceeds k_max {}", cfg.k_max);
    let seg = Segments::new(prefixes);
    let bsz = seg.batch();
    let items: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
    let positions: Vec<usize> = prefixes.iter().flat_map(|p| 0..p.len()).collect();
    let e = g.gather_rows(pv.item_emb, &items);
    let p = g.gather_rows(pv.item_pos, &positions);
    let mut x = g.add(e, p);
    x = maybe_dropout(g, x, &mut dropout);

    let layout = Arc::new(item_layout(&seg, cfg.mask_mode, cfg.heads));
    let mut item_keys = Vec::with_capacity(pv.layers.len());
    let mut item_values = Vec::with_capacity(pv.layers.len());
    for lv in &pv.layers {
        let (h, kk, vv) = block(g, lv, x, &[], &[], layout.clone(), &mut dropout);
        x = h;
        item_keys.push(kk);
        item_values.push(vv);
    }
    let last: Vec<usize> = (0..bsz).map(|b| seg.items(b).end - 1).collect();
    let mut clean = vec![g.gather_rows(x, &last)];

    let mut step_keys: Vec<Vec<Var>> = item_keys.iter().map(|&kk| vec![kk]).collect();
    let mut step_values: Vec<Vec<Var>> = item_values.iter().map(|&vv| vec![vv]).collect();
    let mut step_inputs = Vec::with_capacity(k);
    for i in 1..=k {
        let rpe = g.gather_rows(pv.reason_pos, &[i - 1]);
        let input = g.add_row(clean[i - 1], rpe);
        step_inputs.push(input);
        let layout = Arc::new(reasoning_layout(&seg, i..=i, cfg.heads));
        let mut h = input;
        for (l, lv) in pv.layers.iter().enumerate() {
            let (out, kk, vv) = block(g, lv, h, &step_keys[l], &step_values[l], layout.clone(), &mut dropout);
            h = out;
            step_keys[l].push(kk);
            step_values[l].push(vv);
        }
        clean.push(h);
    }

    let mut noisy = Vec::new();
    if let Some(noise) = noise.filter(|_| k > 0) {
        assert_eq!(noise.len(), k, "one noise tensor per reasoning step");
        let perturbed: Vec<Var> = step_inputs
            .iter()
            .zip(noise)
            .map(|(&inp, eps)| {
                let eps = g.leaf(eps.clone());
                g.add(inp, eps)
            })
            .collect();
        let mut h = g.concat_rows(&perturbed);
        let layout = Arc::new(reasoning_layout(&seg, 1..=k, cfg.heads));
        for (l, lv) in pv.layers.iter().enumerate() {
            let (out, _, _) = block(g, lv, h, &[item_keys[l]], &[item_values[l]], layout.clone(), &mut dropout);
            h = out;
        }
        for i in 1..=k {
            let rows: Vec<usize> = ((i - 1) * bsz..i * bsz).collect();
            noisy.push(g.gather_rows(h, &rows));
        }
    }
    BatchStates { clean, noisy }
}
