//! Forward and backward kernels for the fused operations.

use super::array::gemm;
use crate::par;

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-softmax of one row, written into `out`.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ls = row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m) - ls;
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        s += *o;
    }
    // keep every component strictly inside (0, 1); the clamp moves values by at most one ulp
    let hi = if out.len() > 1 { 1.0 - f64::EPSILON / 2.0 } else { 1.0 };
    for o in out.iter_mut() {
        *o = (*o / s).clamp(f64::MIN_POSITIVE, hi);
    }
}

pub(crate) fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..cols {
            or[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for ((xr, dyr), dxr) in x
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * inv;
            dxhat[j] = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        for j in 0..cols {
            dxr[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Packed causal self-attention. `q`, `k`, `v` are `[T, d]` with the rows of
/// consecutive sequences (lengths `segs`) stacked; attention never crosses a
/// segment boundary.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segs: &[usize],
    heads: usize,
) -> Vec<f64> {
    let offsets = segment_offsets(segs);
    let chunks = par::map_range(segs.len(), |s| {
        let (off, len) = (offsets[s], segs[s]);
        attention_segment_forward(
            &q[off * d..(off + len) * d],
            &k[off * d..(off + len) * d],
            &v[off * d..(off + len) * d],
            len,
            d,
            heads,
        )
    });
    chunks.concat()
}

fn head_probs(q: &[f64], k: &[f64], len: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; len * len];
    for i in 0..len {
        let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
        let row = &mut p[i * len..i * len + i + 1];
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
            *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            s += *r;
        }
        for r in row.iter_mut() {
            *r /= s;
        }
    }
    p
}

fn attention_segment_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; len * d];
    for h in 0..heads {
        let p = head_probs(q, k, len, d, h, dh);
        for i in 0..len {
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..=i {
                let w = p[i * len + j];
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += w * vc;
                }
            }
        }
    }
    out
}

/// Returns (dq, dk, dv).
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    d: usize,
    segs: &[usize],
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let offsets = segment_offsets(segs);
    let parts = par::map_range(segs.len(), |s| {
        let (off, len) = (offsets[s], segs[s]);
        let r = off * d..(off + len) * d;
        attention_segment_backward(
            &q[r.clone()],
            &k[r.clone()],
            &v[r.clone()],
            &dout[r],
            len,
            d,
            heads,
        )
    });
    let mut dq = Vec::with_capacity(q.len());
    let mut dk = Vec::with_capacity(q.len());
    let mut dv = Vec::with_capacity(q.len());
    for (a, b, c) in parts {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

fn attention_segment_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dout: &[f64],
    len: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; len * d];
    let mut dk = vec![0.0; len * d];
    let mut dv = vec![0.0; len * d];
    let mut ds = vec![0.0; len];
    for h in 0..heads {
        let p = head_probs(q, k, len, d, h, dh);
        let hs = h * dh..(h + 1) * dh;
        for i in 0..len {
            let doi = &dout[i * d + hs.start..i * d + hs.end];
            // dP_ij = dO_i . V_j ; dS = P (dP - sum_j P dP)
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &v[j * d + hs.start..j * d + hs.end];
                let dp = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                ds[j] = dp;
                dot += p[i * len + j] * dp;
            }
            for j in 0..=i {
                let pij = p[i * len + j];
                let dsij = pij * (ds[j] - dot) * scale;
                for c in 0..dh {
                    dv[j * d + hs.start + c] += pij * doi[c];
                    dq[i * d + hs.start + c] += dsij * k[j * d + hs.start + c];
                    dk[j * d + hs.start + c] += dsij * q[i * d + hs.start + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

pub(crate) fn segment_offsets(segs: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(segs.len());
    let mut acc = 0;
    for &s in segs {
        offs.push(acc);
        acc += s;
    }
    offs
}

/// `out[m,n] = a[m,k] · b[k,n]` (optionally transposed operands).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, a_t, b, b_t, &mut c, false);
    c
}
