//! Small matrix kernels backing the conv and linear layers.
//!
//! Plain safe Rust, written so the inner loops are contiguous saxpy passes
//! that LLVM autovectorizes. All variants accumulate into `c` (callers zero
//! the output when they want a plain product), and all are deterministic:
//! the reduction order is fixed by the loop structure, never by the thread
//! schedule.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] @ b[k,n]`.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        saxpy_row(k, n, arow, b, crow);
    }
}

/// `c[m,n] += a[k,m]^T @ b[k,n]`.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let alpha = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += alpha * brow[j];
            }
        }
    }
}

/// One output row of `gemm_nn`, k-unrolled by 4 to amortize the c-row
/// traffic. The adds stay sequential in k, so the result is bit-identical
/// to a plain nested-loop product (the reduction order callers rely on).
#[inline]
fn saxpy_row<S: Scalar>(k: usize, n: usize, arow: &[S], b: &[S], crow: &mut [S]) {
    let k4 = k / 4 * 4;
    let mut p = 0;
    while p < k4 {
        let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        let b2 = &b[(p + 2) * n..(p + 3) * n];
        let b3 = &b[(p + 3) * n..(p + 4) * n];
        for j in 0..n {
            let mut acc = crow[j];
            acc += a0 * b0[j];
            acc += a1 * b1[j];
            acc += a2 * b2[j];
            acc += a3 * b3[j];
            crow[j] = acc;
        }
        p += 4;
    }
    while p < k {
        let alpha = arow[p];
        let brow = &b[p * n..(p + 1) * n];
        for j in 0..n {
            crow[j] += alpha * brow[j];
        }
        p += 1;
    }
}

/// `gemm_nn` with the rows of `c` split across the rayon pool. Bitwise
/// identical to the sequential version (rows are independent).
pub fn par_gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, crow)| saxpy_row(k, n, &a[i * k..(i + 1) * k], b, crow));
}

/// `gemm_tn` with the rows of `c` split across the rayon pool.
pub fn par_gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| {
        for p in 0..k {
            let alpha = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += alpha * brow[j];
            }
        }
    });
}

/// `out[cols,rows] = a[rows,cols]^T`.
pub fn transpose<S: Scalar>(rows: usize, cols: usize, a: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let arow = &a[r * cols..(r + 1) * cols];
        for (c, &v) in arow.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn nn_matches_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 9, 2), (8, 4, 8)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 1.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.11 + 0.5).collect();
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b));
            let mut cp = vec![0.0; m * n];
            par_gemm_nn(m, k, n, &a, &b, &mut cp);
            assert_eq!(cp, c);
        }
    }

    #[test]
    fn tn_matches_naive_on_transposed_input() {
        let (m, k, n) = (4, 6, 5);
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.2).collect();
        // materialize a = at^T and compare against gemm_nn
        let mut a = vec![0.0; m * k];
        transpose(k, m, &at, &mut a);
        let mut want = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut want);
        let mut got = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut got);
        assert_eq!(got, want);
        let mut gotp = vec![0.0; m * n];
        par_gemm_tn(m, k, n, &at, &b, &mut gotp);
        assert_eq!(gotp, want);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut t = vec![0.0; 12];
        transpose(3, 4, &a, &mut t);
        let mut back = vec![0.0; 12];
        transpose(4, 3, &t, &mut back);
        assert_eq!(a, back);
    }
}
