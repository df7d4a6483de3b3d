//! Small dense kernels the forward and backward passes are built from.
//! Row-major slices throughout; shapes are passed explicitly.
//!
//! Everything routes through a 4-way register-blocked axpy so the inner
//! loops are elementwise (no horizontal reductions) and vectorize cleanly.
//! The blocking fixes the floating-point summation order as part of each
//! kernel's definition, keeping results deterministic.

use crate::scalar::Real;

/// Dot product with eight independent accumulator lanes.
#[allow(dead_code)] // exercised by tests; kept as the scalar reference kernel
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha * x`
#[inline(always)]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    let x = &x[..y.len()];
    if alpha == T::zero() {
        return;
    }
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `y += c0*x0 + c1*x1 + c2*x2 + c3*x3`
#[inline(always)]
fn axpy4<T: Real>(c: [T; 4], x0: &[T], x1: &[T], x2: &[T], x3: &[T], y: &mut [T]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x0[..n], &x1[..n], &x2[..n], &x3[..n]);
    for j in 0..n {
        y[j] += c[0] * x0[j] + c[1] * x1[j] + c[2] * x2[j] + c[3] * x3[j];
    }
}

/// Accumulates `coeffs[l] * rows(l)` into `y`, where `rows(l)` is row `l` of
/// `mat` (row-major, `stride` columns) truncated to `y.len()`. The workhorse
/// behind every matrix product here.
#[inline(always)]
fn axpy_rows<T: Real>(coeffs: &[T], mat: &[T], stride: usize, y: &mut [T]) {
    let k = coeffs.len();
    let mut l = 0;
    while l + 4 <= k {
        let c = [coeffs[l], coeffs[l + 1], coeffs[l + 2], coeffs[l + 3]];
        axpy4(
            c,
            &mat[l * stride..],
            &mat[(l + 1) * stride..],
            &mat[(l + 2) * stride..],
            &mat[(l + 3) * stride..],
            y,
        );
        l += 4;
    }
    while l < k {
        axpy(coeffs[l], &mat[l * stride..l * stride + y.len()], y);
        l += 1;
    }
}

/// `out[n x m] = a[m x n]^T`
pub fn transposed<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        axpy_rows(arow, b, n, orow);
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
pub fn matmul_abt<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let bt = transposed(b, n, k);
    matmul(out, a, &bt, m, k, n);
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub fn matmul_atb<T: Real>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let at = transposed(a, m, k);
    matmul(out, &at, b, k, m, n);
}

/// Causal bilinear scores: `row_t[tp] = <q_t, k_tp>` for `tp <= t`, written
/// into the `t_len x t_len` buffer `scores` (future entries untouched).
/// Works on the transposed key matrix `kt` (`d_head x t_len`).
pub fn causal_scores<T: Real>(scores: &mut [T], q: &[T], kt: &[T], t_len: usize, d_head: usize) {
    debug_assert_eq!(scores.len(), t_len * t_len);
    debug_assert_eq!(q.len(), t_len * d_head);
    debug_assert_eq!(kt.len(), t_len * d_head);
    for t in 0..t_len {
        let qrow = &q[t * d_head..(t + 1) * d_head];
        let row = &mut scores[t * t_len..t * t_len + t + 1];
        axpy_rows(qrow, kt, t_len, row);
    }
}

/// Causal weighted row sum: `out_t = sum_{tp <= t} w[t*t_len + tp] * rows[tp]`
/// with `rows` a `t_len x width` matrix. Used for attention-context and the
/// matching backward accumulations.
pub fn causal_mix<T: Real>(out: &mut [T], w: &[T], rows: &[T], t_len: usize, width: usize) {
    debug_assert_eq!(out.len(), t_len * width);
    debug_assert_eq!(w.len(), t_len * t_len);
    debug_assert_eq!(rows.len(), t_len * width);
    for t in 0..t_len {
        let orow = &mut out[t * width..(t + 1) * width];
        axpy_rows(&w[t * t_len..t * t_len + t + 1], rows, width, orow);
    }
}

/// Reverse-causal weighted row sum: `out_tp += sum_{t >= tp} wt[tp*t_len + t] * rows[t]`
/// where `wt` is the transposed weight matrix. Suffix counterpart of
/// [`causal_mix`].
pub fn causal_mix_rev<T: Real>(out: &mut [T], wt: &[T], rows: &[T], t_len: usize, width: usize) {
    debug_assert_eq!(out.len(), t_len * width);
    debug_assert_eq!(wt.len(), t_len * t_len);
    debug_assert_eq!(rows.len(), t_len * width);
    for tp in 0..t_len {
        let orow = &mut out[tp * width..(tp + 1) * width];
        let coeffs = &wt[tp * t_len + tp..(tp + 1) * t_len];
        let tail = &rows[tp * width..];
        axpy_rows(coeffs, tail, width, orow);
    }
}

/// Numerically stable softmax over `row[..len]`, in place. Entries past `len`
/// are left untouched (callers keep them at zero for the causal mask).
#[inline]
pub fn softmax_prefix<T: Real>(row: &mut [T], len: usize) {
    let mut max = T::neg_infinity();
    for &v in &row[..len] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..len] {
        *v *= inv;
    }
}
