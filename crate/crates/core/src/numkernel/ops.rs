//! Graph-free numeric kernels shared by the autodiff graph and the inference
//! fast path. Only the kernels that perform multiply-accumulates on the model
//! dimensions report to the operation counter.

use super::counter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon inside root-mean-square normalisation.
pub const NORM_EPS: f64 = 1e-6;

/// `out[m×n] = a[m×k] · b[k×n]`. Counted.
///
/// Each output element accumulates over `k` in ascending order starting from
/// zero, so results are bit-identical to a naive triple loop.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    counter::tally_macs((m * k * n) as u64);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `db[k×n] += aᵀ · g` where `a` is m×k and `g` is m×n. Not counted.
pub(crate) fn gemm_at_b_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let d_row = &mut db[kk * n..(kk + 1) * n];
            for (d, &gv) in d_row.iter_mut().zip(g_row) {
                *d += aik * gv;
            }
        }
    }
}

/// `da[m×k] += g · bᵀ` where `g` is m×n and `b` is k×n. Not counted.
pub(crate) fn gemm_a_bt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let d_row = &mut da[i * k..(i + 1) * k];
        for (kk, d) in d_row.iter_mut().enumerate() {
            *d += dot(g_row, &b[kk * n..(kk + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Normalises one row to unit RMS and applies the gain. Returns `1/rms`.
pub fn rms_norm_row(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    if gain.len() != x.cols() {
        return Err(Error::Dimension {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    let c = x.cols();
    for (xr, orow) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        rms_norm_row(xr, gain.data(), orow);
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = silu_scalar(*v));
    out
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let c = logits.cols();
    if targets.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    for (row, &t) in logits.data().chunks(c).zip(targets) {
        if t >= c {
            return Err(Error::Label { label: t, classes: c });
        }
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / targets.len() as f64)
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Multi-head attention of one query row over `n_pos` cached key/value rows.
/// Counted: `2·n_pos·d` multiply-accumulates (scores plus weighted sum).
///
/// When `probs` is given it receives the `heads × n_pos` attention weights.
pub fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_pos: usize,
    heads: usize,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let d = q.len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    counter::tally_macs((2 * n_pos * d) as u64);
    let mut scores = vec![0.0; n_pos];
    for h in 0..heads {
        let off = h * dk;
        let qh = &q[off..off + dk];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d + off..j * d + off + dk]) * scale;
        }
        softmax_in_place(&mut scores);
        let oh = &mut out[off..off + dk];
        oh.fill(0.0);
        for (j, &p) in scores.iter().enumerate() {
            for (o, &v) in oh.iter_mut().zip(&values[j * d + off..j * d + off + dk]) {
                *o += p * v;
            }
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr[h * n_pos..(h + 1) * n_pos].copy_from_slice(&scores);
        }
    }
}
