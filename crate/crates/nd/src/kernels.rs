//! Slice-level numeric kernels shared by the tape operations.

use crate::mask::Mask;
use crate::real::Real;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] · b[k,n]ᵀ`.
pub fn matmul_a_bt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · g[m,n]`.
pub fn matmul_at_b<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
    let s: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= s;
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise normalization; returns (y, xhat, inv_std).
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::of(LAYER_NORM_EPS);
    let dn = T::of(d as f64);
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut inv = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for c in 0..d {
            let h = (xr[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, xhat, inv)
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    inv: &[T],
    gamma: &[T],
    rows: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dn = T::of(d as f64);
    let mut dx = vec![T::zero(); rows * d];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut sum_dh = T::zero();
        let mut sum_dh_h = T::zero();
        for c in 0..d {
            dgamma[c] += gr[c] * hr[c];
            dbeta[c] += gr[c];
            dxhat[c] = gr[c] * gamma[c];
            sum_dh += dxhat[c];
            sum_dh_h += dxhat[c] * hr[c];
        }
        let scale = inv[r] / dn;
        for c in 0..d {
            dx[r * d + c] = scale * (dn * dxhat[c] - sum_dh - hr[c] * sum_dh_h);
        }
    }
    (dx, dgamma, dbeta)
}

/// Multi-head scaled dot-product attention. Returns the output and the
/// per-head probability tensor `[heads, nq, nk]` (exact zeros where masked).
/// Errors with the index of the first query row that admits no key.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &Mask,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> Result<(Vec<T>, Vec<T>), usize> {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); nq * d];
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut scores = vec![T::zero(); nk];
    for i in 0..nq {
        let mrow = mask.row(i);
        if !mrow.iter().any(|&m| m) {
            return Err(i);
        }
        for h in 0..heads {
            let off = h * dh;
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = T::neg_infinity();
            for j in 0..nk {
                if mrow[j] {
                    let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let mut total = T::zero();
            for j in 0..nk {
                if mrow[j] {
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    total += e;
                }
            }
            let o = &mut out[i * d + off..i * d + off + dh];
            for j in 0..nk {
                if mrow[j] {
                    p[j] /= total;
                    let pj = p[j];
                    for (ov, &vv) in o.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *ov += pj * vv;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    g: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..nk {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                dp[j] = dot(gi, &v[j * d + off..j * d + off + dh]);
                weighted += p[j] * dp[j];
                for (dvv, &gv) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                    *dvv += p[j] * gv;
                }
            }
            for j in 0..nk {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Depthwise 1-D convolution over rows; `offset` is the number of frames of
/// left context (kernel − 1 for causal padding, (kernel − 1)/2 for centered).
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv1d<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    t_len: usize,
    c: usize,
    kernel: usize,
    offset: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); t_len * c];
    for t in 0..t_len {
        let o = &mut out[t * c..(t + 1) * c];
        o.copy_from_slice(b);
        for kk in 0..kernel {
            let src = t as isize + kk as isize - offset as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                o[ch] += w[kk * c + ch] * x[src * c + ch];
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn depthwise_conv1d_backward<T: Real>(
    g: &[T],
    x: &[T],
    w: &[T],
    t_len: usize,
    c: usize,
    kernel: usize,
    offset: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); t_len * c];
    let mut dw = vec![T::zero(); kernel * c];
    let mut db = vec![T::zero(); c];
    for t in 0..t_len {
        let gt = &g[t * c..(t + 1) * c];
        for ch in 0..c {
            db[ch] += gt[ch];
        }
        for kk in 0..kernel {
            let src = t as isize + kk as isize - offset as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                dw[kk * c + ch] += gt[ch] * x[src * c + ch];
                dx[src * c + ch] += gt[ch] * w[kk * c + ch];
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_all_negative_infinity() {
        let v = [f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_eq!(log_sum_exp(&v), f64::NEG_INFINITY);
        let v = [0.0f64, 0.0];
        assert!((log_sum_exp(&v) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        // bᵀ materialized explicitly
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let ab2 = matmul_a_bt(&a, &bt, 2, 3, 4);
        for (x, y) in ab.iter().zip(&ab2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
