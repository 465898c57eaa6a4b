//! Raw numeric kernels on flat `f64` slices.
//!
//! Everything here is written so that each output element is a strictly
//! ordered fold over its reduction index, using fused multiply-add as the
//! single rounding step. That makes a row produced by a big matmul
//! bit-identical to the same row produced one position at a time, which the
//! cached-inference path relies on. On x86-64 with AVX2+FMA the hot kernels
//! are compiled with those features enabled; the fallback path computes the
//! exact same values through `f64::mul_add`.

/// c[m×n] += a[m×k] · b[k×n]
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            unsafe { matmul_acc_avx2(c, a, b, m, k, n) };
            return;
        }
    }
    matmul_acc_body(c, a, b, m, k, n);
}

/// c[m×n] += aᵀ · b where a is [k×m] and b is [k×n].
pub fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            unsafe { matmul_tn_acc_avx2(c, a, b, k, m, n) };
            return;
        }
    }
    matmul_tn_acc_body(c, a, b, k, m, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_acc_avx2(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    matmul_acc_body(c, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_tn_acc_avx2(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    matmul_tn_acc_body(c, a, b, k, m, n);
}

// Register-blocked 2×16 tiles; the accumulators live in locals across the
// whole k loop so each c element sees one ordered fma chain.
const JT: usize = 16;

#[inline(always)]
fn matmul_acc_body(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let n_main = n - n % JT;
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let mut jt = 0;
        while jt < n_main {
            let mut acc0 = [0.0f64; JT];
            let mut acc1 = [0.0f64; JT];
            for kk in 0..k {
                let bv = &b[kk * n + jt..kk * n + jt + JT];
                let x0 = a0[kk];
                let x1 = a1[kk];
                for t in 0..JT {
                    acc0[t] = x0.mul_add(bv[t], acc0[t]);
                    acc1[t] = x1.mul_add(bv[t], acc1[t]);
                }
            }
            let c0 = &mut c[i * n + jt..i * n + jt + JT];
            for t in 0..JT {
                c0[t] += acc0[t];
            }
            let c1 = &mut c[(i + 1) * n + jt..(i + 1) * n + jt + JT];
            for t in 0..JT {
                c1[t] += acc1[t];
            }
            jt += JT;
        }
        for j in n_main..n {
            let mut s0 = 0.0f64;
            let mut s1 = 0.0f64;
            for kk in 0..k {
                s0 = a0[kk].mul_add(b[kk * n + j], s0);
                s1 = a1[kk].mul_add(b[kk * n + j], s1);
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
        }
        i += 2;
    }
    if i < m {
        let a0 = &a[i * k..(i + 1) * k];
        let mut jt = 0;
        while jt < n_main {
            let mut acc0 = [0.0f64; JT];
            for kk in 0..k {
                let bv = &b[kk * n + jt..kk * n + jt + JT];
                let x0 = a0[kk];
                for t in 0..JT {
                    acc0[t] = x0.mul_add(bv[t], acc0[t]);
                }
            }
            let c0 = &mut c[i * n + jt..i * n + jt + JT];
            for t in 0..JT {
                c0[t] += acc0[t];
            }
            jt += JT;
        }
        for j in n_main..n {
            let mut s0 = 0.0f64;
            for kk in 0..k {
                s0 = a0[kk].mul_add(b[kk * n + j], s0);
            }
            c[i * n + j] += s0;
        }
    }
}

#[inline(always)]
fn matmul_tn_acc_body(c: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    let n_main = n - n % JT;
    let mut i = 0;
    while i + 2 <= m {
        let mut jt = 0;
        while jt < n_main {
            let mut acc0 = [0.0f64; JT];
            let mut acc1 = [0.0f64; JT];
            for kk in 0..k {
                let bv = &b[kk * n + jt..kk * n + jt + JT];
                let x0 = a[kk * m + i];
                let x1 = a[kk * m + i + 1];
                for t in 0..JT {
                    acc0[t] = x0.mul_add(bv[t], acc0[t]);
                    acc1[t] = x1.mul_add(bv[t], acc1[t]);
                }
            }
            let c0 = &mut c[i * n + jt..i * n + jt + JT];
            for t in 0..JT {
                c0[t] += acc0[t];
            }
            let c1 = &mut c[(i + 1) * n + jt..(i + 1) * n + jt + JT];
            for t in 0..JT {
                c1[t] += acc1[t];
            }
            jt += JT;
        }
        for j in n_main..n {
            let mut s0 = 0.0f64;
            let mut s1 = 0.0f64;
            for kk in 0..k {
                s0 = a[kk * m + i].mul_add(b[kk * n + j], s0);
                s1 = a[kk * m + i + 1].mul_add(b[kk * n + j], s1);
            }
            c[i * n + j] += s0;
            c[(i + 1) * n + j] += s1;
        }
        i += 2;
    }
    if i < m {
        for j in 0..n {
            let mut s0 = 0.0f64;
            for kk in 0..k {
                s0 = a[kk * m + i].mul_add(b[kk * n + j], s0);
            }
            c[i * n + j] += s0;
        }
    }
}

/// dst[cols×rows] = srcᵀ for src[rows×cols].
pub fn transpose_into(dst: &mut [f64], src: &[f64], rows: usize, cols: usize) {
    debug_assert_eq!(dst.len(), rows * cols);
    debug_assert_eq!(src.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Strictly ordered scalar fma dot product. Matches the per-element fold of
/// the matmul kernels, so a score computed incrementally equals the
/// corresponding matmul entry bit-for-bit.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0f64;
    for t in 0..x.len() {
        acc = x[t].mul_add(y[t], acc);
    }
    acc
}

/// out[j] += a · x[j]
#[inline]
pub fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = a.mul_add(v, *o);
    }
}

/// Row softmax over the attendable range `[start, end)`; masked entries are
/// written as exact zeros. Returns `false` when the range is empty.
pub fn softmax_row_range(out: &mut [f64], row: &[f64], start: usize, end: usize) -> bool {
    debug_assert_eq!(out.len(), row.len());
    if start >= end {
        return false;
    }
    let mut mx = f64::NEG_INFINITY;
    for &v in &row[start..end] {
        if v > mx {
            mx = v;
        }
    }
    for o in out[..start].iter_mut() {
        *o = 0.0;
    }
    for o in out[end..].iter_mut() {
        *o = 0.0;
    }
    let mut sum = 0.0f64;
    for j in start..end {
        let e = (row[j] - mx).exp();
        out[j] = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out[start..end].iter_mut() {
        *o *= inv;
    }
    true
}

/// log p(target) for one logit row, via max-shifted log-sum-exp.
pub fn log_prob_of(row: &[f64], target: usize) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v - mx).exp();
    }
    row[target] - mx - sum.ln()
}

/// Normalize one vector to zero mean / unit variance, then apply the affine
/// gain and bias. Returns `(mean, inv_std)` for the backward rule.
pub fn layernorm_row(
    out: &mut [f64],
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (f64, f64) {
    let d = x.len();
    debug_assert!(d > 0);
    let mut mean = 0.0f64;
    for &v in x {
        mean += v;
    }
    mean /= d as f64;
    let mut var = 0.0f64;
    for &v in x {
        let c = v - mean;
        var = c.mul_add(c, var);
    }
    var /= d as f64;
    let inv_std = 1.0 / (var + eps).sqrt();
    for j in 0..d {
        out[j] = ((x[j] - mean) * inv_std).mul_add(gain[j], bias[j]);
    }
    (mean, inv_std)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// d gelu(x) / dx for the tanh approximation.
#[inline]
pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (5, 7, 19);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 17) as f64) * 0.25).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&mut c, &a, &b, m, k, n);
        let want = naive_matmul(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_row_equals_single_row_call() {
        let (m, k, n) = (9, 33, 21);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.618).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.414).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&mut c, &a, &b, m, k, n);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul_acc(&mut row, &a[i * k..(i + 1) * k], &b, 1, k, n);
            assert_eq!(&c[i * n..(i + 1) * n], &row[..], "row {i} not bitwise equal");
        }
    }

    #[test]
    fn dot_matches_matmul_entry() {
        let k = 45;
        let x: Vec<f64> = (0..k).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..k).map(|i| (i as f64 * 2.3).cos()).collect();
        // dot equals a 1×k · kᵀ... matmul against y laid out as a k×1 matrix
        let mut c = vec![0.0; 1];
        matmul_acc(&mut c, &x, &y, 1, k, 1);
        assert_eq!(dot(&x, &y).to_bits(), c[0].to_bits());
    }

    #[test]
    fn tn_matches_naive_transpose() {
        let (k, m, n) = (6, 4, 10);
        let a: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut at = vec![0.0; m * k];
        transpose_into(&mut at, &a, k, m);
        let want = naive_matmul(&at, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        matmul_tn_acc(&mut c, &a, &b, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_masked_and_normalized() {
        let row = [3.0, 1.0, -2.0, 0.5];
        let mut out = [0.0; 4];
        assert!(softmax_row_range(&mut out, &row, 1, 3));
        assert_eq!(out[0], 0.0);
        assert_eq!(out[3], 0.0);
        let s: f64 = out.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(!softmax_row_range(&mut out, &row, 2, 2));
    }
}
