//! Row-major matrix products.
//!
//! All three layouts go through a single-threaded blocked GEMM addressed by
//! strides, so no operand is ever transposed in memory. Reduction order is
//! fixed for a given CPU, which keeps reruns bitwise identical.

use super::Real;

/// `c = a · b` with `a` addressed as `[m×k]` and `b` as `[k×n]` through
/// `(row, column)` strides.
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    T::gemm(m, k, n, a, sa, b, sb, &mut out);
    out
}

/// `a [m×k] · b [k×n]`.
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, a, (k, 1), b, (n, 1))
}

/// `a [m×k] · bᵀ` where `b` is stored `[n×k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    gemm(m, k, n, a, (k, 1), b, (1, k))
}

/// `aᵀ · b` where `a` is stored `[m×k]` and `b` is `[m×n]`; result is `[k×n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    gemm(k, m, n, a, (1, k), b, (n, 1))
}

/// Dot product with four independent accumulators (fixed reduction order).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn three_layouts_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|x| (x as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|x| (x as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let nn = matmul_nn(&a, &b, m, k, n);
        let nt = matmul_nt(&a, &transpose(&b, k, n), m, k, n);
        let tn = matmul_tn(&transpose(&a, m, k), &b, k, m, n);
        for i in 0..m * n {
            assert!((nn[i] - want[i]).abs() < 1e-12);
            assert!((nt[i] - want[i]).abs() < 1e-12);
            assert!((tn[i] - want[i]).abs() < 1e-12);
        }
    }
}
