//! Untracked kernels shared by the tape and by plain evaluation code.

use super::tensor::dot;
use super::Tensor;
use crate::error::{Error, Result};
use crate::graphio::SparseAdjacency;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax of `values / temperature` with max subtraction.
pub fn softmax_slice(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Row-wise softmax at the given temperature.
///
/// Every row is shifted by its maximum before exponentiation, so logits of
/// magnitude far beyond `exp`'s range stay finite.
pub fn row_softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    let (r, c) = x.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        out.row_mut(i)
            .copy_from_slice(&softmax_slice(x.row(i), temperature));
    }
    Ok(out)
}

/// The `T → 0⁺` limit of [`row_softmax`]: one-hot at each row's maximum,
/// ties broken toward the lowest index.
pub fn row_softmax_limit(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let k = x.row_argmax(i);
        out.set(i, k, 1.0);
    }
    out
}

pub fn column_sums(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Tensor::new(vec![1, c], out).expect("shape")
}

/// `row i = Σ_{j ∈ N(i)} dense[j]` over unit edge weights.
pub fn sparse_dense_matmul(adj: &SparseAdjacency, dense: &Tensor) -> Result<Tensor> {
    sparse_dense_matmul_weighted(adj, None, dense)
}

/// `row i = Σ_{k=(i,j)} weights[k]·dense[j]`; `None` means unit weights.
pub fn sparse_dense_matmul_weighted(
    adj: &SparseAdjacency,
    weights: Option<&[f64]>,
    dense: &Tensor,
) -> Result<Tensor> {
    if dense.shape().len() != 2 || dense.rows() != adj.n() {
        return Err(Error::Dimension {
            op: "sparse_dense_matmul",
            lhs: vec![adj.n(), adj.n()],
            rhs: dense.shape().to_vec(),
        });
    }
    if let Some(w) = weights {
        if w.len() != adj.num_edges() {
            return Err(Error::Structural(format!(
                "{} edge weights for {} edges",
                w.len(),
                adj.num_edges()
            )));
        }
    }
    let d = dense.cols();
    let mut out = Tensor::zeros(&[adj.n(), d]);
    for i in 0..adj.n() {
        for k in adj.row_range(i) {
            let j = adj.cols()[k];
            let w = weights.map_or(1.0, |w| w[k]);
            let src = dense.row(j);
            for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Softmax attention evaluated one query row at a time. Returns the output
/// and the per-row log-normalizer used by the backward pass.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = q.dims2();
    let (m, dk) = k.dims2();
    let (mv, dv) = v.dims2();
    if d != dk || m != mv || m == 0 {
        return Err(Error::Dimension {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![m, dk, mv, dv],
        });
    }
    let mut out = Tensor::zeros(&[n, dv]);
    let mut lse = vec![0.0; n];
    let mut scores = vec![0.0; m];
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, k.row(j)) * scale;
            max = max.max(*s);
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let o = out.row_mut(i);
        for (j, &s) in scores.iter().enumerate() {
            let w = s / total;
            for (ov, vv) in o.iter_mut().zip(v.row(j)) {
                *ov += w * vv;
            }
        }
        lse[i] = max + total.ln();
    }
    Ok((out, lse))
}

/// Attention weights `softmax(q·kᵀ·scale)` as a dense `[n×m]` matrix.
pub fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Result<Tensor> {
    let logits = q.matmul_nt(k)?.scale(scale);
    row_softmax(&logits, 1.0)
}

pub(crate) fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    g: &Tensor,
    scale: f64,
    lse: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = q.dims2();
    let m = k.rows();
    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut p = vec![0.0; m];
    for i in 0..n {
        let qi = q.row(i);
        let gi = g.row(i);
        let delta = dot(gi, out.row(i));
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = (dot(qi, k.row(j)) * scale - lse[i]).exp();
        }
        for j in 0..m {
            let pj = p[j];
            for (o, gv) in dv.row_mut(j).iter_mut().zip(gi) {
                *o += pj * gv;
            }
            let ds = pj * (dot(gi, v.row(j)) - delta) * scale;
            if ds == 0.0 {
                continue;
            }
            for (o, kv) in dq.row_mut(i).iter_mut().zip(k.row(j)) {
                *o += ds * kv;
            }
            for (o, qv) in dk.row_mut(j).iter_mut().zip(qi) {
                *o += ds * qv;
            }
        }
    }
    (dq, dk, dv)
}
