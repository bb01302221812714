//! Neural primitives composed from tape operations.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x W + b` over the trailing axis of `x`.
pub fn linear(t: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = t.shape(x);
    let wshape = t.shape(w);
    let (din, dout) = match wshape[..] {
        [a, b] => (a, b),
        _ => return Err(Error::shape("linear", format!("weight {wshape:?}"))),
    };
    if shape.last() != Some(&din) {
        return Err(Error::shape(
            "linear",
            format!("input {shape:?} against weight {wshape:?}"),
        ));
    }
    let rows = shape.iter().product::<usize>() / din.max(1);
    let flat = if shape.len() == 2 {
        x
    } else {
        t.reshape(x, &[rows, din])?
    };
    let y = t.add_row(t.matmul(flat, w)?, b)?;
    if shape.len() == 2 {
        Ok(y)
    } else {
        let mut out = shape;
        *out.last_mut().unwrap() = dout;
        t.reshape(y, &out)
    }
}

pub fn layer_norm(t: &Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let n = t.normalize_rows(x, eps)?;
    t.add_row(t.mul_row(n, gamma)?, beta)
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product attention with `heads` heads; `q: [Nq,D]`,
/// `k, v: [Nk,D]`.
pub fn multi_head_attention(
    t: &Tape,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let (qs, ks, vs) = (t.shape(q), t.shape(k), t.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] || qs[1] != ks[1] {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        ));
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qp = linear(t, q, p.wq, p.bq)?;
    let kp = linear(t, k, p.wk, p.bk)?;
    let vp = linear(t, v, p.wv, p.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                t.slice_cols(qp, a, b)?,
                t.slice_cols(kp, a, b)?,
                t.slice_cols(vp, a, b)?,
            )
        };
        let scores = t.scale(t.matmul(qh, t.transpose(kh)?)?, scale)?;
        let weights = t.softmax(scores, 1)?;
        outs.push(t.matmul(weights, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)?
    };
    linear(t, cat, p.wo, p.bo)
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
pub fn feed_forward(t: &Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = t.relu(linear(t, x, w1, b1)?)?;
    linear(t, h, w2, b2)
}

/// Same-padded 1-D convolution over the leading (time) axis of `x: [T,D]`.
pub fn conv1d_temporal(t: &Tape, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    t.conv1d(x, kernel, bias)
}

/// Eager versions of the primitives for callers without a tape.
pub mod eager {
    use super::*;

    fn run(inputs: &[&Tensor], f: impl FnOnce(&Tape, &[Var]) -> Result<Var>) -> Result<Tensor> {
        let t = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| t.constant((*x).clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&t, &vars)?;
        let value = t.value(out).clone();
        Ok(value)
    }

    pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        run(&[x, w, b], |t, v| super::linear(t, v[0], v[1], v[2]))
    }

    pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
        run(&[x], |t, v| t.softmax(v[0], axis))
    }

    pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        run(&[x, gamma, beta], |t, v| {
            super::layer_norm(t, v[0], v[1], v[2], eps)
        })
    }

    pub fn conv1d_temporal(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        run(&[x, kernel, bias], |t, v| t.conv1d(v[0], v[1], v[2]))
    }

    /// Weights in the order `wq, bq, wk, bk, wv, bv, wo, bo`.
    pub fn multi_head_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        weights: [&Tensor; 8],
        heads: usize,
    ) -> Result<Tensor> {
        let mut all = vec![q, k, v];
        all.extend_from_slice(&weights);
        run(&all, |t, x| {
            let p = AttentionVars {
                wq: x[3],
                bq: x[4],
                wk: x[5],
                bk: x[6],
                wv: x[7],
                bv: x[8],
                wo: x[9],
                bo: x[10],
            };
            super::multi_head_attention(t, x[0], x[1], x[2], &p, heads)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::eager;
    use super::*;
    use crate::rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(
            shape.to_vec(),
            1.0,
            &mut rng::indexed_stream(seed, "nn-test", 0),
        )
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::new([1, 2], vec![1., 2.]).unwrap();
        let y = eager::linear(&x, &Tensor::eye(2), &Tensor::zeros([2])).unwrap();
        assert_eq!(y.data(), &[1., 2.]);
        let y = eager::linear(
            &x,
            &Tensor::eye(2),
            &Tensor::new([2], vec![3., 4.]).unwrap(),
        )
        .unwrap();
        assert_eq!(y.data(), &[4., 6.]);
    }

    #[test]
    fn linear_matches_double_loop() {
        let x = rand(&[3, 4], 1);
        let w = rand(&[4, 2], 2);
        let b = rand(&[2], 3);
        let y = eager::linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.at(&[j]);
                for p in 0..4 {
                    acc += x.at(&[i, p]) * w.at(&[p, j]);
                }
                assert!((y.at(&[i, j]) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let err = eager::linear(
            &Tensor::zeros([1, 3]),
            &Tensor::zeros([2, 2]),
            &Tensor::zeros([2]),
        );
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_broadcasts_leading_extents() {
        let x = rand(&[2, 3, 4], 4);
        let w = rand(&[4, 5], 5);
        let b = rand(&[5], 6);
        let y = eager::linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let flat = eager::linear(&x.clone().reshape([6, 4]).unwrap(), &w, &b).unwrap();
        assert_eq!(y.data(), flat.data());
    }

    #[test]
    fn softmax_examples() {
        let u = eager::softmax(&Tensor::zeros([3]), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = eager::softmax(&Tensor::new([1], vec![42.0]).unwrap(), 0).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let s = eager::softmax(&Tensor::new([3], vec![1., 2., 3.]).unwrap(), 0).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = rand(&[3, 2], 7);
        let s = eager::softmax(&x, 0).unwrap();
        for j in 0..2 {
            let col: f64 = (0..3).map(|i| s.at(&[i, j])).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::full([1, 4], 3.0);
        let y =
            eager::layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let x = rand(&[2, 5], 8);
        let y = eager::layer_norm(
            &x,
            &Tensor::zeros([5]),
            &Tensor::full([5], 1.5),
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = rand(&[3, 6], 9);
        let y =
            eager::layer_norm(&x, &Tensor::ones([6]), &Tensor::zeros([6]), LAYER_NORM_EPS).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for (j, v) in row.iter().enumerate() {
                let expect = (v - mean) / (var + LAYER_NORM_EPS).sqrt();
                assert!((y.at(&[r, j]) - expect).abs() <= 1e-10);
            }
            let out = y.row(r);
            let m = out.iter().sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-10);
        }
    }

    fn attn_weights(d: usize, seed: u64) -> Vec<Tensor> {
        (0..8)
            .map(|i| {
                if i % 2 == 0 {
                    rand(&[d, d], seed + i)
                } else {
                    rand(&[d], seed + i)
                }
            })
            .collect()
    }

    fn as_arr(w: &[Tensor]) -> [&Tensor; 8] {
        [&w[0], &w[1], &w[2], &w[3], &w[4], &w[5], &w[6], &w[7]]
    }

    #[test]
    fn attention_with_one_key() {
        let d = 4;
        let w = attn_weights(d, 20);
        let q = rand(&[3, d], 30);
        let k = rand(&[1, d], 31);
        let v = rand(&[1, d], 32);
        let out = eager::multi_head_attention(&q, &k, &v, as_arr(&w), 2).unwrap();
        // A single key gets weight one: every query row sees Wo(Wv v + bv) + bo.
        let vp = eager::linear(&v, &w[4], &w[5]).unwrap();
        let expect = eager::linear(&vp, &w[6], &w[7]).unwrap();
        for r in 0..3 {
            for j in 0..d {
                assert!((out.at(&[r, j]) - expect.at(&[0, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_head_matches_direct_formula() {
        let d = 3;
        let w = attn_weights(d, 40);
        let q = rand(&[2, d], 50);
        let k = rand(&[4, d], 51);
        let v = rand(&[4, d], 52);
        let out = eager::multi_head_attention(&q, &k, &v, as_arr(&w), 1).unwrap();
        let qp = eager::linear(&q, &w[0], &w[1]).unwrap();
        let kp = eager::linear(&k, &w[2], &w[3]).unwrap();
        let vp = eager::linear(&v, &w[4], &w[5]).unwrap();
        let mut mixed = Tensor::zeros([2, d]);
        for i in 0..2 {
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    (0..d).map(|c| qp.at(&[i, c]) * kp.at(&[j, c])).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..d {
                let v: f64 = (0..4)
                    .map(|j| (scores[j] - m).exp() / z * vp.at(&[j, c]))
                    .sum();
                mixed.set(&[i, c], v);
            }
        }
        let expect = eager::linear(&mixed, &w[6], &w[7]).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let w = attn_weights(3, 60);
        let x = rand(&[2, 3], 61);
        assert!(matches!(
            eager::multi_head_attention(&x, &x, &x, as_arr(&w), 2),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn conv_examples() {
        // Centered identity kernel.
        let d = 2;
        let mut k = Tensor::zeros([3, d, d]);
        for i in 0..d {
            k.set(&[1, i, i], 1.0);
        }
        let x = rand(&[5, d], 70);
        let y = eager::conv1d_temporal(&x, &k, &Tensor::zeros([d])).unwrap();
        assert_eq!(y.data(), x.data());

        // Averaging taps with zero padding on [1,2,3].
        let k = Tensor::full([3, 1, 1], 1.0 / 3.0);
        let x = Tensor::new([3, 1], vec![1., 2., 3.]).unwrap();
        let y = eager::conv1d_temporal(&x, &k, &Tensor::zeros([1])).unwrap();
        let expect = [1.0, 2.0, 5.0 / 3.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        // T=1: only the center tap sees data.
        let k5 = rand(&[5, 1, 1], 71);
        let x = Tensor::new([1, 1], vec![2.0]).unwrap();
        let y = eager::conv1d_temporal(&x, &k5, &Tensor::zeros([1])).unwrap();
        assert_eq!(y.data(), &[2.0 * k5.at(&[2, 0, 0])]);
    }
}
