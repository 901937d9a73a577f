use std::sync::Arc;

use super::tensor::{dot, softmax_in_place, Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse multi-head attention pattern: for each query row, the key rows it may
/// attend to. Rows not listed receive exactly zero probability.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub heads: usize,
    pub allowed: Vec<Vec<usize>>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    MeanAxis(Var, usize),
    Sum(Var),
    Log {
        x: Var,
        floor: T,
    },
    Exp(Var),
    RowDot(Var, Var),
    ConcatRows(Vec<Var>),
    Dropout(Var, Vec<T>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so a node's
/// parents always have smaller indices.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    clamped_logs: usize,
}

/// Gradients of a scalar output with respect to every node that influenced it.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            clamped_logs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log` entries that hit their probability floor so far.
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data()[0]
    }

    /// A leaf; gradients flow into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.len(), xv.cols(), "broadcast row width mismatch");
        let mut out = xv.clone();
        let b = rv.data().to_vec();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_slice_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    /// Row-wise softmax of `x + mask`; `mask` is a constant additive term.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Var {
        let mut out = match mask {
            Some(m) => self.value(x).zip_map(m, |a, b| a + b),
            None => self.value(x).clone(),
        };
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        self.push(out, Op::Softmax(x))
    }

    /// Row-wise layer normalization with `1 x c` scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Rows `table[idx[i]]`, stacked.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::from_vec(vec![idx.len(), c], out);
        self.push(v, Op::GatherRows(table, idx.to_vec()))
    }

    /// Column `cols[i]` of row `i`, as an `r x 1` column.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), cols.len());
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| xv.get(r, c))
            .collect::<Vec<_>>();
        let v = Tensor::from_vec(vec![cols.len(), 1], out);
        self.push(v, Op::PickPerRow(x, cols.to_vec()))
    }

    /// Mean over rows (`axis = 0`, giving `1 x c`) or columns (`axis = 1`, giving `r x 1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let v = match axis {
            0 => {
                let mut acc = vec![T::zero(); cols];
                for r in 0..rows {
                    for (a, &v) in acc.iter_mut().zip(xv.row_slice(r)) {
                        *a += v;
                    }
                }
                let n = T::of(rows as f64);
                Tensor::from_vec(vec![1, cols], acc.into_iter().map(|a| a / n).collect())
            }
            1 => {
                let n = T::of(cols as f64);
                let out = (0..rows)
                    .map(|r| xv.row_slice(r).iter().copied().sum::<T>() / n)
                    .collect();
                Tensor::from_vec(vec![rows, 1], out)
            }
            _ => panic!("mean_axis supports axis 0 or 1"),
        };
        self.push(v, Op::MeanAxis(x, axis))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `ln(max(x, floor))`; entries at the floor pass no gradient.
    pub fn log(&mut self, x: Var, floor: T) -> Var {
        let mut clamped = 0;
        let v = self.value(x).map(|a| {
            if a < floor {
                clamped += 1;
                floor.ln()
            } else {
                a.ln()
            }
        });
        if clamped > 0 {
            self.clamped_logs += clamped;
            log::warn!("{clamped} probabilities clamped at floor {floor} before log");
        }
        self.push(v, Op::Log { x, floor })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    /// Row-wise dot product, giving an `r x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let out = (0..av.rows())
            .map(|r| dot(av.row_slice(r), bv.row_slice(r)))
            .collect::<Vec<_>>();
        let v = Tensor::from_vec(vec![av.rows(), 1], out);
        self.push(v, Op::RowDot(a, b))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat width mismatch");
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let v = Tensor::from_vec(vec![rows, cols], out);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Multiplies by a fixed mask (already scaled by `1 / (1 - p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len());
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::from_vec(xv.shape().to_vec(), data);
        self.push(v, Op::Dropout(x, mask))
    }

    /// Multi-head scaled dot-product attention restricted to `layout`.
    ///
    /// `q` has one row per query; `k` and `v` share a row space that
    /// `layout.allowed` indexes into.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let heads = layout.heads;
        assert_eq!(d % heads, 0);
        assert_eq!(qv.rows(), layout.allowed.len());
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); qv.rows() * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (r, allowed) in layout.allowed.iter().enumerate() {
            let q_row = qv.row_slice(r);
            for h in 0..heads {
                let span = h * dh..(h + 1) * dh;
                scores.clear();
                scores.extend(
                    allowed
                        .iter()
                        .map(|&j| dot(&q_row[span.clone()], &kv.row_slice(j)[span.clone()]) * scale),
                );
                softmax_in_place(&mut scores);
                let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for (&j, &p) in allowed.iter().zip(&scores) {
                    for (oo, &vvv) in o.iter_mut().zip(&vv.row_slice(j)[span.clone()]) {
                        *oo += p * vvv;
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
        let value = Tensor::from_vec(vec![qv.rows(), d], out);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    /// Gradients of the `1 x 1` node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    // y = a b^T: da = g b, db = g^T a
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y);
                    let db = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddRow(x, row) => {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for r in 0..g.rows() {
                        for (d, &gg) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += gg;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    accumulate(&mut grads, *row, Tensor::from_vec(shape, db));
                    accumulate(&mut grads, *x, g);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let inner = dot(g.row_slice(r), yr);
                        for (d, (&gg, &yy)) in dx.row_slice_mut(r).iter_mut().zip(g.row_slice(r).iter().zip(yr)) {
                            *d = yy * (gg - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    let mut dx = vec![T::zero(); rows * cols];
                    let n = T::of(cols as f64);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for c in 0..cols {
                            dgamma[c] += gr[c] * xh[c];
                            dbeta[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xh[c];
                        }
                        mean_dxhat = mean_dxhat / n;
                        mean_dxhat_xhat = mean_dxhat_xhat / n;
                        for c in 0..cols {
                            dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::from_vec(gshape, dgamma));
                    accumulate(&mut grads, *beta, Tensor::from_vec(bshape, dbeta));
                    accumulate(&mut grads, *x, Tensor::from_vec(vec![rows, cols], dx));
                }
                Op::Gelu(x) => {
                    let dx = g.zip_map(self.value(*x), |gg, xx| gg * gelu_grad(xx));
                    accumulate(&mut grads, *x, dx);
                }
                Op::GatherRows(table, idx) => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &gg) in dt.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                            *d += gg;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::PickPerRow(x, cols) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.shape());
                    let w = xv.cols();
                    for (r, &c) in cols.iter().enumerate() {
                        dx.data_mut()[r * w + c] += g.data()[r];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAxis(x, axis) => {
                    let xv = self.value(*x);
                    let (rows, cols) = (xv.rows(), xv.cols());
                    let mut dx = Tensor::zeros(xv.shape());
                    if *axis == 0 {
                        let n = T::of(rows as f64);
                        for r in 0..rows {
                            for (d, &gg) in dx.row_slice_mut(r).iter_mut().zip(g.data()) {
                                *d = gg / n;
                            }
                        }
                    } else {
                        let n = T::of(cols as f64);
                        for r in 0..rows {
                            let gg = g.data()[r] / n;
                            dx.row_slice_mut(r).iter_mut().for_each(|d| *d = gg);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let gg = g.data()[0];
                    let dx = Tensor::full(self.value(*x).shape(), gg);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Log { x, floor } => {
                    let floor = *floor;
                    let dx = g.zip_map(self.value(*x), |gg, xx| if xx < floor { T::zero() } else { gg / xx });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = g.zip_map(&node.value, |gg, yy| gg * yy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = bv.clone();
                    let mut db = av.clone();
                    for r in 0..av.rows() {
                        let gg = g.data()[r];
                        da.row_slice_mut(r).iter_mut().for_each(|v| *v *= gg);
                        db.row_slice_mut(r).iter_mut().for_each(|v| *v *= gg);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let len = pv.rows() * cols;
                        let piece = Tensor::from_vec(pv.shape().to_vec(), g.data()[start..start + len].to_vec());
                        start += len;
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::Dropout(x, mask) => {
                    let data = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape().to_vec(), data));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols();
                    let heads = layout.heads;
                    let dh = d / heads;
                    let scale = T::of(1.0 / (dh as f64).sqrt());
                    let mut dq = Tensor::zeros(qv.shape());
                    let mut dk = Tensor::zeros(kv.shape());
                    let mut dv = Tensor::zeros(vv.shape());
                    let mut offset = 0;
                    let mut dp = Vec::new();
                    for (r, allowed) in layout.allowed.iter().enumerate() {
                        let g_row = g.row_slice(r);
                        for h in 0..heads {
                            let span = h * dh..(h + 1) * dh;
                            let p = &probs[offset..offset + allowed.len()];
                            offset += allowed.len();
                            let go = &g_row[span.clone()];
                            dp.clear();
                            for (&j, &pj) in allowed.iter().zip(p) {
                                dp.push(dot(go, &vv.row_slice(j)[span.clone()]));
                                for (d, &gg) in dv.row_slice_mut(j)[span.clone()].iter_mut().zip(go) {
                                    *d += pj * gg;
                                }
                            }
                            let inner = dot(&dp, p);
                            for ((&j, &pj), &dpj) in allowed.iter().zip(p).zip(&dp) {
                                let ds = pj * (dpj - inner) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let k_row = kv.row_slice(j)[span.clone()].to_vec();
                                for (d, &kk) in dq.row_slice_mut(r)[span.clone()].iter_mut().zip(&k_row) {
                                    *d += ds * kk;
                                }
                                let q_row = &qv.row_slice(r)[span.clone()];
                                for (d, &qq) in dk.row_slice_mut(j)[span.clone()].iter_mut().zip(q_row) {
                                    *d += ds * qq;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Tanh-approximated GeLU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * du
}

/// Layer normalization of one row with the same constants as the tape op.
pub(crate) fn layer_norm_row<T: Scalar>(row: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    row.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (v - mean) * rs * g + b)
        .collect()
}
