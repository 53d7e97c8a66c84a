//! Dense matrix kernels behind the tensor ops.
//!
//! Everything here is deterministic regardless of thread count: work is
//! partitioned over disjoint output rows and each output element is
//! accumulated in a fixed order, so the parallel and serial paths produce
//! bitwise-identical results.

use super::scalar::Scalar;
use crate::util::serial_mode;
use rayon::prelude::*;

const LANES: usize = 8;

#[inline(always)]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let ab = &a[i * LANES..(i + 1) * LANES];
        let bb = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + ab[l] * bb[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline(always)]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

/// One output row of `C = A · B^T` against four B rows at a time.
#[inline(always)]
fn row_nt<S: Scalar>(a_row: &[S], b: &[S], k: usize, n: usize, out_row: &mut [S]) {
    let mut j = 0;
    while j + 4 <= n {
        let b0 = &b[j * k..j * k + k];
        let b1 = &b[(j + 1) * k..(j + 1) * k + k];
        let b2 = &b[(j + 2) * k..(j + 2) * k + k];
        let b3 = &b[(j + 3) * k..(j + 3) * k + k];
        let mut acc0 = [S::zero(); LANES];
        let mut acc1 = [S::zero(); LANES];
        let mut acc2 = [S::zero(); LANES];
        let mut acc3 = [S::zero(); LANES];
        let chunks = k / LANES;
        for c in 0..chunks {
            let base = c * LANES;
            let av = &a_row[base..base + LANES];
            let b0v = &b0[base..base + LANES];
            let b1v = &b1[base..base + LANES];
            let b2v = &b2[base..base + LANES];
            let b3v = &b3[base..base + LANES];
            for l in 0..LANES {
                acc0[l] = acc0[l] + av[l] * b0v[l];
                acc1[l] = acc1[l] + av[l] * b1v[l];
                acc2[l] = acc2[l] + av[l] * b2v[l];
                acc3[l] = acc3[l] + av[l] * b3v[l];
            }
        }
        let mut s = [S::zero(); 4];
        for l in 0..LANES {
            s[0] += acc0[l];
            s[1] += acc1[l];
            s[2] += acc2[l];
            s[3] += acc3[l];
        }
        for i in chunks * LANES..k {
            s[0] += a_row[i] * b0[i];
            s[1] += a_row[i] * b1[i];
            s[2] += a_row[i] * b2[i];
            s[3] += a_row[i] * b3[i];
        }
        out_row[j] = s[0];
        out_row[j + 1] = s[1];
        out_row[j + 2] = s[2];
        out_row[j + 3] = s[3];
        j += 4;
    }
    while j < n {
        out_row[j] = dot(a_row, &b[j * k..j * k + k]);
        j += 1;
    }
}

/// `C[m,n] = A[m,k] · B[n,k]^T`. B is stored row-major with `n` rows of
/// length `k` (the natural layout for linear weights `[out, in]`).
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |(a_row, out_row): (&[S], &mut [S])| row_nt(a_row, b, k, n, out_row);
    if serial_mode() || m < 4 {
        a.chunks(k).zip(out.chunks_mut(n)).for_each(body);
    } else {
        a.par_chunks(k)
            .zip(out.par_chunks_mut(n))
            .for_each(body);
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`, accumulated row-by-row so the inner loop walks
/// contiguous memory in both B and C.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |(a_row, out_row): (&[S], &mut [S])| {
        out_row.fill(S::zero());
        for (p, &alpha) in a_row.iter().enumerate() {
            axpy(alpha, &b[p * n..p * n + n], out_row);
        }
    };
    if serial_mode() || m < 4 {
        a.chunks(k).zip(out.chunks_mut(n)).for_each(body);
    } else {
        a.par_chunks(k)
            .zip(out.par_chunks_mut(n))
            .for_each(body);
    }
}

/// `C[k,n] = A[m,k]^T · B[m,n]`. This is the weight-gradient shape
/// (`dW = dY^T · X`). Parallel over blocks of output rows; each block scans
/// A and B once in row order, so accumulation order per element is fixed.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(S::zero());
    let block = 32usize;
    let body = |(bi, out_block): (usize, &mut [S])| {
        let p0 = bi * block;
        let rows = out_block.len() / n;
        for mi in 0..m {
            let b_row = &b[mi * n..mi * n + n];
            let a_row = &a[mi * k..mi * k + k];
            for r in 0..rows {
                let alpha = a_row[p0 + r];
                if alpha != S::zero() {
                    axpy(alpha, b_row, &mut out_block[r * n..r * n + n]);
                }
            }
        }
    };
    if serial_mode() || k <= block {
        out.chunks_mut(block * n).enumerate().for_each(|(bi, ob)| body((bi, ob)));
    } else {
        out.par_chunks_mut(block * n)
            .enumerate()
            .for_each(|(bi, ob)| body((bi, ob)));
    }
}

/// Row-wise softmax with max-subtraction, writing in place.
/// Returns an error marker (false) for zero-length rows.
pub fn softmax_rows_inplace<S: Scalar>(data: &mut [S], cols: usize) {
    assert!(cols > 0, "softmax: empty rows");
    for row in data.chunks_mut(cols) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, k, n) = (7, 19, 11);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 29) as f64 - 14.0) / 9.0).collect();
        let want = naive_mm(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, m, k, n, &mut c);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n); // [n, k]
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &bt, m, k, n, &mut c2);
        for (x, y) in c2.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // C[k,n] = A^T[k,m] · A2[m,n] checked against naive on transposed A.
        let at = transpose(&a, m, k); // [k, m]
        let want_tn = naive_mm(&at, &b[..m * n.min(b.len() / m)], k, m, n.min(b.len() / m));
        let mut c3 = vec![0.0; k * n.min(b.len() / m)];
        gemm_tn(&a, &b[..m * n.min(b.len() / m)], m, k, n.min(b.len() / m), &mut c3);
        for (x, y) in c3.iter().zip(want_tn.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let (m, k, n) = (64, 96, 80);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 97 % 41) as f32 - 20.0) / 13.0).collect();
        let b: Vec<f32> = (0..n * k).map(|i| ((i * 61 % 43) as f32 - 21.0) / 17.0).collect();
        let mut c_par = vec![0.0f32; m * n];
        gemm_nt(&a, &b, m, k, n, &mut c_par);
        crate::util::set_serial(true);
        let mut c_ser = vec![0.0f32; m * n];
        gemm_nt(&a, &b, m, k, n, &mut c_ser);
        crate::util::set_serial(false);
        assert_eq!(c_par, c_ser);
    }
}
