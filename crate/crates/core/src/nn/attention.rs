//! Scaled dot-product and multi-head attention with backward passes.
//!
//! Sequences are row-major `(len, dim)` matrices. Per-head projections are
//! packed column-wise: `W_Q` is `(d_model, heads * d_k)` with head `i`
//! occupying columns `i*d_k .. (i+1)*d_k`.

use super::{softmax, Scalar, Tensor};
use crate::error::{Error, Result};

/// `a (m x k) * b (k x n)`.
fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out += a^T (m x k)^T * b (m x n)`, i.e. `(k x n)`.
fn add_matmul_at_b<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
}

/// `a (m x n) * b^T` where `b` is `(k x n)`; result `(m x k)`.
fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for j in 0..k {
            out[i * k + j] = a[i * n..(i + 1) * n].iter().zip(&b[j * n..(j + 1) * n]).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

fn add_bias_rows<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn sum_rows_into<T: Scalar>(out: &mut [T], x: &[T]) {
    for row in x.chunks(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Column block `[col0, col0 + width)` of a row-major matrix with `cols` columns.
fn columns<T: Scalar>(x: &[T], cols: usize, col0: usize, width: usize) -> Vec<T> {
    x.chunks(cols).flat_map(|r| r[col0..col0 + width].iter().copied()).collect()
}

fn scatter_columns<T: Scalar>(dst: &mut [T], cols: usize, col0: usize, src: &[T], width: usize) {
    for (drow, srow) in dst.chunks_mut(cols).zip(src.chunks(width)) {
        drow[col0..col0 + width].copy_from_slice(srow);
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V`, returning the output and the attention probabilities.
pub fn scaled_dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape {
            context: "attention Q/K/V",
            left: [qs, ks].concat(),
            right: vs.to_vec(),
        });
    }
    let (lq, dk, lk, dv) = (qs[0], qs[1], ks[0], vs[1]);
    let (out, probs) = attend(q.data(), k.data(), v.data(), lq, lk, dk, dv);
    Ok((Tensor::new(vec![lq, dv], out)?, Tensor::new(vec![lq, lk], probs)?))
}

fn attend<T: Scalar>(q: &[T], k: &[T], v: &[T], lq: usize, lk: usize, dk: usize, dv: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::of(dk as f64).sqrt();
    let mut scores = matmul_a_bt(q, k, lq, dk, lk);
    scores.iter_mut().for_each(|s| *s *= scale);
    let probs: Vec<T> = scores.chunks(lk).flat_map(softmax).collect();
    let out = matmul(&probs, v, lq, lk, dv);
    (out, probs)
}

/// Borrowed multi-head attention weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a, T> {
    pub w_q: &'a [T],
    pub b_q: &'a [T],
    pub w_k: &'a [T],
    pub b_k: &'a [T],
    pub w_v: &'a [T],
    pub b_v: &'a [T],
    pub w_o: &'a [T],
    pub b_o: &'a [T],
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl<T: Scalar> AttentionParams<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let (dm, hk, hv) = (self.d_model, self.heads * self.d_k, self.heads * self.d_v);
        let expect = [
            (self.w_q.len(), dm * hk),
            (self.b_q.len(), hk),
            (self.w_k.len(), dm * hk),
            (self.b_k.len(), hk),
            (self.w_v.len(), dm * hv),
            (self.b_v.len(), hv),
            (self.w_o.len(), hv * dm),
            (self.b_o.len(), dm),
        ];
        for (got, want) in expect {
            if got != want {
                return Err(Error::Shape {
                    context: "attention parameter size",
                    left: vec![got],
                    right: vec![want],
                });
            }
        }
        Ok(())
    }
}

/// Forward intermediates needed by [`mha_backward`].
#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    pub lq: usize,
    pub lk: usize,
    pub x_q: Vec<T>,
    pub x_kv: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// `heads` blocks of `(lq, lk)` probabilities.
    pub probs: Vec<T>,
    pub concat: Vec<T>,
    pub out: Vec<T>,
}

pub fn mha_forward<T: Scalar>(p: &AttentionParams<T>, x_q: &[T], lq: usize, x_kv: &[T], lk: usize) -> MhaCache<T> {
    let (dm, h, dk, dv) = (p.d_model, p.heads, p.d_k, p.d_v);
    let mut q = matmul(x_q, p.w_q, lq, dm, h * dk);
    add_bias_rows(&mut q, p.b_q);
    let mut k = matmul(x_kv, p.w_k, lk, dm, h * dk);
    add_bias_rows(&mut k, p.b_k);
    let mut v = matmul(x_kv, p.w_v, lk, dm, h * dv);
    add_bias_rows(&mut v, p.b_v);

    let mut concat = vec![T::zero(); lq * h * dv];
    let mut probs = Vec::with_capacity(h * lq * lk);
    for head in 0..h {
        let qh = columns(&q, h * dk, head * dk, dk);
        let kh = columns(&k, h * dk, head * dk, dk);
        let vh = columns(&v, h * dv, head * dv, dv);
        let (oh, ph) = attend(&qh, &kh, &vh, lq, lk, dk, dv);
        scatter_columns(&mut concat, h * dv, head * dv, &oh, dv);
        probs.extend(ph);
    }
    let mut out = matmul(&concat, p.w_o, lq, h * dv, dm);
    add_bias_rows(&mut out, p.b_o);
    MhaCache {
        lq,
        lk,
        x_q: x_q.to_vec(),
        x_kv: x_kv.to_vec(),
        q,
        k,
        v,
        probs,
        concat,
        out,
    }
}

/// Gradient slots for one attention block, same packing as [`AttentionParams`].
pub struct AttentionGrads<'a, T> {
    pub w_q: &'a mut [T],
    pub b_q: &'a mut [T],
    pub w_k: &'a mut [T],
    pub b_k: &'a mut [T],
    pub w_v: &'a mut [T],
    pub b_v: &'a mut [T],
    pub w_o: &'a mut [T],
    pub b_o: &'a mut [T],
}

/// Accumulates parameter gradients; returns `(d x_q, d x_kv)`.
pub fn mha_backward<T: Scalar>(
    p: &AttentionParams<T>,
    c: &MhaCache<T>,
    grad_out: &[T],
    g: AttentionGrads<T>,
) -> (Vec<T>, Vec<T>) {
    let (dm, h, dk, dv, lq, lk) = (p.d_model, p.heads, p.d_k, p.d_v, c.lq, c.lk);
    let scale = T::one() / T::of(dk as f64).sqrt();

    add_matmul_at_b(g.w_o, &c.concat, grad_out, lq, h * dv, dm);
    sum_rows_into(g.b_o, grad_out);
    let d_concat = matmul_a_bt(grad_out, p.w_o, lq, dm, h * dv);

    let mut dq = vec![T::zero(); lq * h * dk];
    let mut dk_all = vec![T::zero(); lk * h * dk];
    let mut dv_all = vec![T::zero(); lk * h * dv];
    for head in 0..h {
        let qh = columns(&c.q, h * dk, head * dk, dk);
        let kh = columns(&c.k, h * dk, head * dk, dk);
        let vh = columns(&c.v, h * dv, head * dv, dv);
        let ph = &c.probs[head * lq * lk..(head + 1) * lq * lk];
        let d_oh = columns(&d_concat, h * dv, head * dv, dv);

        // dP = dO V^T ; dV = P^T dO
        let dp = matmul_a_bt(&d_oh, &vh, lq, dv, lk);
        let mut dvh = vec![T::zero(); lk * dv];
        add_matmul_at_b(&mut dvh, ph, &d_oh, lq, lk, dv);
        // softmax backward, then the 1/sqrt(d_k) scale
        let mut ds = vec![T::zero(); lq * lk];
        for r in 0..lq {
            let prow = &ph[r * lk..(r + 1) * lk];
            let dprow = &dp[r * lk..(r + 1) * lk];
            let dot: T = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum();
            for j in 0..lk {
                ds[r * lk + j] = prow[j] * (dprow[j] - dot) * scale;
            }
        }
        let dqh = matmul(&ds, &kh, lq, lk, dk);
        let mut dkh = vec![T::zero(); lk * dk];
        add_matmul_at_b(&mut dkh, &ds, &qh, lq, lk, dk);

        scatter_columns(&mut dq, h * dk, head * dk, &dqh, dk);
        scatter_columns(&mut dk_all, h * dk, head * dk, &dkh, dk);
        scatter_columns(&mut dv_all, h * dv, head * dv, &dvh, dv);
    }

    add_matmul_at_b(g.w_q, &c.x_q, &dq, lq, dm, h * dk);
    sum_rows_into(g.b_q, &dq);
    add_matmul_at_b(g.w_k, &c.x_kv, &dk_all, lk, dm, h * dk);
    sum_rows_into(g.b_k, &dk_all);
    add_matmul_at_b(g.w_v, &c.x_kv, &dv_all, lk, dm, h * dv);
    sum_rows_into(g.b_v, &dv_all);

    let dx_q = matmul_a_bt(&dq, p.w_q, lq, h * dk, dm);
    let mut dx_kv = matmul_a_bt(&dk_all, p.w_k, lk, h * dk, dm);
    for (a, b) in dx_kv.iter_mut().zip(matmul_a_bt(&dv_all, p.w_v, lk, h * dv, dm)) {
        *a += b;
    }
    (dx_q, dx_kv)
}

/// `concat(head_1..head_h) W_O + b_O` with `head_i = Attention(x_q W_Q^i, x_kv W_K^i, x_kv W_V^i)`.
pub fn multi_head_attention<T: Scalar>(x_q: &Tensor<T>, x_kv: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let (qs, ks) = (x_q.shape(), x_kv.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != params.d_model || ks[1] != params.d_model {
        return Err(Error::Shape {
            context: "attention input vs d_model",
            left: [qs, ks].concat(),
            right: vec![params.d_model],
        });
    }
    let cache = mha_forward(params, x_q.data(), qs[0], x_kv.data(), ks[0]);
    Tensor::new(vec![qs[0], params.d_model], cache.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        w: Vec<Vec<f64>>,
        heads: usize,
        dm: usize,
        dk: usize,
        dv: usize,
    }

    impl Owned {
        fn random(heads: usize, dm: usize, dk: usize, dv: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sizes = [dm * heads * dk, heads * dk, dm * heads * dk, heads * dk, dm * heads * dv, heads * dv, heads * dv * dm, dm];
            let w = sizes
                .iter()
                .map(|&n| (0..n).map(|_| rng.random_range(-0.7..0.7)).collect())
                .collect();
            Self { w, heads, dm, dk, dv }
        }

        fn params(&self) -> AttentionParams<'_, f64> {
            AttentionParams {
                w_q: &self.w[0],
                b_q: &self.w[1],
                w_k: &self.w[2],
                b_k: &self.w[3],
                w_v: &self.w[4],
                b_v: &self.w[5],
                w_o: &self.w[6],
                b_o: &self.w[7],
                heads: self.heads,
                d_model: self.dm,
                d_k: self.dk,
                d_v: self.dv,
            }
        }
    }

    /// Independent per-element evaluation of softmax(QK^T/sqrt(dk))V.
    fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let dk = q[0].len() as f64;
        q.iter()
            .map(|qi| {
                let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt()).collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
            })
            .collect()
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn singleton_sequence_has_unit_weight() {
        let q = Tensor::new(vec![1, 3], vec![0.3, -2.0, 5.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![9.0, 1.0, -4.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
        let (out, probs) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(probs.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::from_fn(vec![2, 4], |_| rng.random_range(-3.0..3.0));
        let k = Tensor::from_fn(vec![3, 4], |i| (i % 4) as f64);
        let v = Tensor::from_fn(vec![3, 2], |_| rng.random_range(-1.0..1.0));
        let (out, probs) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        for r in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 3.0;
                assert!((out.data()[r * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (lq, lk, dk, dv) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..4));
            let q = Tensor::from_fn(vec![lq, dk], |_| rng.random_range(-2.0..2.0));
            let k = Tensor::from_fn(vec![lk, dk], |_| rng.random_range(-2.0..2.0));
            let v = Tensor::from_fn(vec![lk, dv], |_| rng.random_range(-2.0..2.0));
            let (out, probs) = scaled_dot_attention(&q, &k, &v).unwrap();
            for row in probs.data().chunks(lk) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let want = attention_oracle(&rows(&q), &rows(&k), &rows(&v));
            for (a, b) in rows(&out).iter().flatten().zip(want.iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_reduces_to_projected_attention() {
        let w = Owned::random(1, 4, 3, 2, 1);
        let p = w.params();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(vec![3, 4], |_| rng.random_range(-1.0..1.0));
        let out = multi_head_attention(&x, &x, &p).unwrap();
        let proj = |wm: &[f64], b: &[f64], n: usize| {
            let mut m = matmul(x.data(), wm, 3, 4, n);
            add_bias_rows(&mut m, b);
            Tensor::new(vec![3, n], m).unwrap()
        };
        let (head, _) = scaled_dot_attention(&proj(p.w_q, p.b_q, 3), &proj(p.w_k, p.b_k, 3), &proj(p.w_v, p.b_v, 2)).unwrap();
        let mut want = matmul(head.data(), p.w_o, 3, 2, 4);
        add_bias_rows(&mut want, p.b_o);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let w = Owned::random(2, 4, 2, 2, 3);
        let x = Tensor::<f64>::zeros(vec![1, 5]);
        assert!(multi_head_attention(&x, &x, &w.params()).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let w = Owned::random(3, 5, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (lq, lk) = (3, 4);
        let xq: Vec<f64> = (0..lq * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xkv: Vec<f64> = (0..lk * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..lq * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |w: &Owned, xq: &[f64], xkv: &[f64]| -> f64 {
            let c = mha_forward(&w.params(), xq, lq, xkv, lk);
            c.out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };

        let mut grads: Vec<Vec<f64>> = w.w.iter().map(|t| vec![0.0; t.len()]).collect();
        let cache = mha_forward(&w.params(), &xq, lq, &xkv, lk);
        let (dxq, dxkv) = {
            let [g0, g1, g2, g3, g4, g5, g6, g7] = &mut grads[..] else { unreachable!() };
            mha_backward(
                &w.params(),
                &cache,
                &upstream,
                AttentionGrads {
                    w_q: g0,
                    b_q: g1,
                    w_k: g2,
                    b_k: g3,
                    w_v: g4,
                    b_v: g5,
                    w_o: g6,
                    b_o: g7,
                },
            )
        };

        let eps = 1e-6;
        let rel = |a: &[f64], n: &[f64]| {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // key biases shift every score in a row equally, so their true
            // gradient is zero and only finite-difference noise remains
            if norm(a) < 1e-9 && norm(n) < 1e-9 {
                return 0.0;
            }
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            diff / (norm(a) + norm(n))
        };
        for (t, analytic) in grads.iter().enumerate() {
            let num: Vec<f64> = (0..analytic.len())
                .map(|i| {
                    let mut wp = Owned { w: w.w.clone(), ..w };
                    wp.w[t][i] += eps;
                    let up = loss(&wp, &xq, &xkv);
                    wp.w[t][i] -= 2.0 * eps;
                    let down = loss(&wp, &xq, &xkv);
                    (up - down) / (2.0 * eps)
                })
                .collect();
            assert!(rel(analytic, &num) < 1e-6, "param {t}: {}", rel(analytic, &num));
        }
        for (analytic, x, is_q) in [(&dxq, &xq, true), (&dxkv, &xkv, false)] {
            let mut num = vec![0.0; x.len()];
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp[i] += eps;
                let up = if is_q { loss(&w, &xp, &xkv) } else { loss(&w, &xq, &xp) };
                xp[i] -= 2.0 * eps;
                let down = if is_q { loss(&w, &xp, &xkv) } else { loss(&w, &xq, &xp) };
                num[i] = (up - down) / (2.0 * eps);
            }
            assert!(rel(analytic, &num) < 1e-6);
        }
    }
}
