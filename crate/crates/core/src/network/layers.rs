//! Layers with explicit forward caches and gradient accumulation.

use super::linalg::{matmul, matmul_a_bt_acc, matmul_at_b_acc};
use super::params::ParameterSet;

#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

pub fn linear_fwd(p: &ParameterSet, l: LinearIdx, x: &[f64], n: usize) -> Vec<f64> {
    let (i, o) = (l.fan_in, l.fan_out);
    let mut y = vec![0.0; n * o];
    matmul(x, &p.tensors[l.w].data, n, i, o, &mut y);
    let b = &p.tensors[l.b].data;
    for row in y.chunks_exact_mut(o) {
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

/// Accumulates parameter gradients into `g`; returns `dX`.
pub fn linear_bwd(p: &ParameterSet, g: &mut ParameterSet, l: LinearIdx, x: &[f64], dy: &[f64], n: usize) -> Vec<f64> {
    let (i, o) = (l.fan_in, l.fan_out);
    matmul_at_b_acc(x, dy, n, i, o, &mut g.tensors[l.w].data);
    let db = &mut g.tensors[l.b].data;
    for row in dy.chunks_exact(o) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = vec![0.0; n * i];
    matmul_a_bt_acc(dy, &p.tensors[l.w].data, n, i, o, &mut dx);
    dx
}

pub struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

const LN_EPS: f64 = 1e-6;

pub fn norm_fwd(p: &ParameterSet, l: NormIdx, x: &[f64]) -> (Vec<f64>, NormCache) {
    let d = l.dim;
    let n = x.len() / d;
    let gain = &p.tensors[l.gain].data;
    let bias = &p.tensors[l.bias].data;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn norm_bwd(p: &ParameterSet, g: &mut ParameterSet, l: NormIdx, cache: &NormCache, dy: &[f64]) -> Vec<f64> {
    let d = l.dim;
    let n = dy.len() / d;
    let gain = &p.tensors[l.gain].data;
    let mut dx = vec![0.0; dy.len()];
    {
        let dg = &mut g.tensors[l.gain].data;
        for r in 0..n {
            for c in 0..d {
                dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
            }
        }
    }
    {
        let db = &mut g.tensors[l.bias].data;
        for r in 0..n {
            for c in 0..d {
                db[c] += dy[r * d + c];
            }
        }
    }
    let mut dh = vec![0.0; d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..d {
            dh[c] = dy[r * d + c] * gain[c];
            m1 += dh[c];
            m2 += dh[c] * xh[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.rstd[r] * (dh[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        })
        .collect()
}

pub fn gelu_bwd(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            let dv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            d * dv
        })
        .collect()
}

/// Group of query rows attending to a contiguous range of key rows.
#[derive(Clone, Copy, Debug)]
pub struct AttnGroup {
    pub q: (usize, usize),
    pub k: (usize, usize),
}

pub struct AttnCache {
    /// Softmax weights, per group then per head, `|q| × |k|` row-major.
    probs: Vec<Vec<f64>>,
}

/// Multi-head scaled dot-product attention over row-major `q (nq×d)`, `k, v (nk×d)`.
pub fn attention_fwd(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize, groups: &[AttnGroup]) -> (Vec<f64>, AttnCache) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let nq = q.len() / d;
    let mut out = vec![0.0; nq * d];
    let mut probs = Vec::with_capacity(groups.len() * heads);
    for gr in groups {
        let (qa, qb) = gr.q;
        let (ka, kb) = gr.k;
        let (mq, mk) = (qb - qa, kb - ka);
        for h in 0..heads {
            let mut s = vec![0.0; mq * mk];
            let off = h * dh;
            if mq * mk >= 64 {
                super::linalg::gemm(
                    mq,
                    dh,
                    mk,
                    scale,
                    &q[qa * d + off..],
                    d as isize,
                    1,
                    &k[ka * d + off..],
                    1,
                    d as isize,
                    0.0,
                    &mut s,
                    mk as isize,
                    1,
                );
            } else {
                for i in 0..mq {
                    let qi = &q[(qa + i) * d + off..(qa + i) * d + off + dh];
                    for j in 0..mk {
                        let kj = &k[(ka + j) * d + off..(ka + j) * d + off + dh];
                        s[i * mk + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            for row in s.chunks_exact_mut(mk) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            // out_h = P V_h
            if mq * mk >= 64 {
                super::linalg::gemm(
                    mq,
                    mk,
                    dh,
                    1.0,
                    &s,
                    mk as isize,
                    1,
                    &v[ka * d + off..],
                    d as isize,
                    1,
                    0.0,
                    &mut out[qa * d + off..],
                    d as isize,
                    1,
                );
            } else {
                for i in 0..mq {
                    for j in 0..mk {
                        let p = s[i * mk + j];
                        let vj = &v[(ka + j) * d + off..(ka + j) * d + off + dh];
                        let o = &mut out[(qa + i) * d + off..(qa + i) * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += p * vv;
                        }
                    }
                }
            }
            probs.push(s);
        }
    }
    (out, AttnCache { probs })
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttnCache,
    dout: &[f64],
    d: usize,
    heads: usize,
    groups: &[AttnGroup],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    use super::linalg::gemm;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let ds = d as isize;
    for (gi, gr) in groups.iter().enumerate() {
        let (qa, qb) = gr.q;
        let (ka, kb) = gr.k;
        let (mq, mk) = (qb - qa, kb - ka);
        for h in 0..heads {
            let p = &cache.probs[gi * heads + h];
            let off = h * dh;
            let big = mq * mk >= 64;
            // dV_h += Pᵀ dO_h ; dP = dO_h V_hᵀ
            let mut dp = vec![0.0; mq * mk];
            if big {
                gemm(mk, mq, dh, 1.0, p, 1, mk as isize, &dout[qa * d + off..], ds, 1, 1.0, &mut dv[ka * d + off..], ds, 1);
                gemm(mq, dh, mk, 1.0, &dout[qa * d + off..], ds, 1, &v[ka * d + off..], 1, ds, 0.0, &mut dp, mk as isize, 1);
            } else {
                for i in 0..mq {
                    let doi = &dout[(qa + i) * d + off..(qa + i) * d + off + dh];
                    for j in 0..mk {
                        let pij = p[i * mk + j];
                        let base = (ka + j) * d + off;
                        let mut acc = 0.0;
                        for c in 0..dh {
                            dv[base + c] += pij * doi[c];
                            acc += doi[c] * v[base + c];
                        }
                        dp[i * mk + j] = acc;
                    }
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for i in 0..mq {
                let row_p = &p[i * mk..(i + 1) * mk];
                let row_dp = &mut dp[i * mk..(i + 1) * mk];
                let dot: f64 = row_p.iter().zip(row_dp.iter()).map(|(a, b)| a * b).sum();
                for (x, pp) in row_dp.iter_mut().zip(row_p) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            if big {
                gemm(mq, mk, dh, 1.0, &dp, mk as isize, 1, &k[ka * d + off..], ds, 1, 1.0, &mut dq[qa * d + off..], ds, 1);
                gemm(mk, mq, dh, 1.0, &dp, 1, mk as isize, &q[qa * d + off..], ds, 1, 1.0, &mut dk[ka * d + off..], ds, 1);
            } else {
                for i in 0..mq {
                    for j in 0..mk {
                        let s = dp[i * mk + j];
                        let qb_ = (qa + i) * d + off;
                        let kb_ = (ka + j) * d + off;
                        for c in 0..dh {
                            dq[qb_ + c] += s * k[kb_ + c];
                            dk[kb_ + c] += s * q[qb_ + c];
                        }
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn added(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}
