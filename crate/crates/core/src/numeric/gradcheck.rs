use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh graph from leaf handles (one per entry of
/// `params`) and returns the `1 x 1` output node. The returned value is the
/// maximum over all parameter entries of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vars);
        let y = g.scalar(out);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Numeric(format!("function value is {y}")))
        }
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars);
    if !g.scalar(out).is_finite() {
        return Err(Error::Numeric(format!("function value is {}", g.scalar(out))));
    }
    let grads = g.backward(out);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::AttentionLayout;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Contracts a node against a fixed random weight so every output entry
    /// contributes a distinct gradient.
    fn contract(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
        let shape = g.value(x).shape().to_vec();
        let w = g.leaf(rand(&shape, seed));
        let m = g.mul(x, w);
        g.sum(m)
    }

    fn check(params: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        grad_check(f, params, EPS).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::row(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.mul(v, v);
        let out = g.sum(sq);
        let grads = g.backward(out);
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 4.0]);
        let err = check(&[x], |g, v| {
            let sq = g.mul(v[0], v[0]);
            g.sum(sq)
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = Tensor::row(vec![0.0; 4]);
        let ce = |g: &mut Graph<f64>, v: &[Var]| {
            let p = g.softmax_rows(v[0], None);
            let picked = g.pick_per_row(p, &[0]);
            let l = g.log(picked, 1e-12);
            let s = g.sum(l);
            g.scale(s, -1.0)
        };
        let mut g = Graph::new();
        let v = g.leaf(logits.clone());
        let out = ce(&mut g, &[v]);
        let grad = g.backward(out).get(v).unwrap().clone();
        for (a, e) in grad.data().iter().zip([-0.75, 0.25, 0.25, 0.25]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(check(&[logits], ce) < 1e-7);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::row(vec![-1.0]);
        let r = grad_check(
            |g, v| {
                let e = g.exp(v[0]);
                let l = g.log(e, 0.0);
                let big = g.scale(l, f64::INFINITY);
                g.sum(big)
            },
            &[x],
            EPS,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_and_transpose() {
        let a = rand(&[3, 4], 1);
        let b = rand(&[4, 2], 2);
        assert!(check(&[a.clone(), b.clone()], |g, v| {
            let m = g.matmul(v[0], v[1]);
            contract(g, m, 3)
        }) < TOL);
        assert!(check(&[a.clone(), b.transpose()], |g, v| {
            let m = g.matmul_t(v[0], v[1]);
            contract(g, m, 4)
        }) < TOL);
        assert!(check(&[a], |g, v| {
            let t = g.transpose(v[0]);
            contract(g, t, 5)
        }) < TOL);
    }

    #[test]
    fn elementwise_ops() {
        let a = rand(&[2, 3], 6);
        let b = rand(&[2, 3], 7);
        let row = rand(&[1, 3], 8);
        let p = [a, b, row];
        assert!(check(&p, |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let sc = g.scale(m, 0.7);
            let r = g.add_row(sc, v[2]);
            contract(g, r, 9)
        }) < TOL);
    }

    #[test]
    fn masked_softmax() {
        let x = rand(&[3, 4], 10);
        let mut mask = Tensor::zeros(&[3, 4]);
        mask.data_mut()[1] = crate::numeric::MASK_VALUE;
        mask.data_mut()[7] = crate::numeric::MASK_VALUE;
        let err = check(&[x.clone()], |g, v| {
            let s = g.softmax_rows(v[0], Some(&mask));
            contract(g, s, 11)
        });
        assert!(err < TOL, "{err}");
        let mut g = Graph::new();
        let v = g.leaf(x);
        let s = g.softmax_rows(v, Some(&mask));
        let y = g.value(s);
        assert!(y.data()[1] <= 1e-9 && y.data()[7] <= 1e-9);
        for r in 0..3 {
            assert!((y.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_and_gelu() {
        let x = rand(&[3, 5], 12);
        let gamma = rand(&[1, 5], 13);
        let beta = rand(&[1, 5], 14);
        assert!(check(&[x.clone(), gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            contract(g, y, 15)
        }) < TOL);
        assert!(check(&[x], |g, v| {
            let y = g.gelu(v[0]);
            contract(g, y, 16)
        }) < TOL);
    }

    #[test]
    fn gather_pick_mean_and_concat() {
        let table = rand(&[5, 3], 17);
        let other = rand(&[2, 3], 18);
        assert!(check(&[table.clone(), other], |g, v| {
            let rows = g.gather_rows(v[0], &[4, 0, 4, 2]);
            let c = g.concat_rows(&[rows, v[1]]);
            let m0 = g.mean_axis(c, 0);
            let m1 = g.mean_axis(c, 1);
            let p = g.pick_per_row(c, &[0, 1, 2, 0, 1, 2]);
            let a = contract(g, m0, 19);
            let b = contract(g, m1, 20);
            let cc = contract(g, p, 21);
            let ab = g.add(a, b);
            g.add(ab, cc)
        }) < TOL);
    }

    #[test]
    fn log_exp_and_row_dot() {
        let a = rand(&[3, 4], 22);
        let b = rand(&[3, 4], 23);
        assert!(check(&[a, b], |g, v| {
            let e = g.exp(v[0]);
            let l = g.log(e, 1e-12);
            let d = g.row_dot(l, v[1]);
            contract(g, d, 24)
        }) < TOL);
    }

    #[test]
    fn sparse_attention() {
        let q = rand(&[3, 4], 25);
        let k = rand(&[5, 4], 26);
        let v = rand(&[5, 4], 27);
        let layout = Arc::new(AttentionLayout {
            heads: 2,
            allowed: vec![vec![0], vec![0, 1, 4], vec![2, 3, 4, 1]],
        });
        let err = check(&[q, k, v], |g, p| {
            let o = g.attention(p[0], p[1], p[2], layout.clone());
            contract(g, o, 28)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn sparse_attention_matches_masked_composition() {
        let q = rand(&[3, 2], 29);
        let k = rand(&[4, 2], 30);
        let v = rand(&[4, 2], 31);
        let allowed = vec![vec![0, 1], vec![1, 2, 3], vec![0, 3]];
        let mut mask = Tensor::full(&[3, 4], crate::numeric::MASK_VALUE);
        for (r, a) in allowed.iter().enumerate() {
            for &j in a {
                mask.data_mut()[r * 4 + j] = 0.0;
            }
        }
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q), g.leaf(k), g.leaf(v));
        let fused = g.attention(qv, kv, vv, Arc::new(AttentionLayout { heads: 1, allowed }));
        let s = g.matmul_t(qv, kv);
        let s = g.scale(s, 1.0 / 2f64.sqrt());
        let p = g.softmax_rows(s, Some(&mask));
        let composed = g.matmul(p, vv);
        for (a, b) in g.value(fused).data().iter().zip(g.value(composed).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_gradient() {
        let x = rand(&[2, 3], 32);
        let mask = vec![0.0, 1.25, 1.25, 0.0, 1.25, 1.25];
        assert!(check(&[x], |g, v| {
            let y = g.dropout_with_mask(v[0], mask.clone());
            contract(g, y, 33)
        }) < TOL);
    }
}
