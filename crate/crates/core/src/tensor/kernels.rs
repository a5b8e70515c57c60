//! Dense 2D matrix kernels. Loop orders are chosen so the inner loop runs
//! over contiguous rows of the output, and the accumulation pattern is
//! spelled out explicitly (fixed unroll widths, fixed-order partial sums) so
//! the compiler can vectorize without reassociating floating-point math.
//! The optional row parallelism assigns each output row to exactly one task,
//! so results are identical for any worker count.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which threading is pure overhead.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |crow: &mut [S], arow: &[S]| {
        let mut p = 0;
        // four rows of B per pass over the output row: fewer stores per FMA
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
            p += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| row(crow, arow));
    } else {
        for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k)) {
            row(crow, arow);
        }
    }
}

/// Dot product with eight independent accumulators, summed in a fixed order.
#[inline]
fn dot8<S: Scalar>(x: &[S], y: &[S]) -> S {
    let n = x.len();
    debug_assert_eq!(n, y.len());
    let mut acc = [S::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += x[base + l] * y[base + l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..n {
        tail += x[i] * y[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// C[m,k] += A[m,n] * B[k,n]^T  (B stored row-major [k,n])
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let row = |crow: &mut [S], arow: &[S]| {
        for p in 0..k {
            crow[p] += dot8(arow, &b[p * n..(p + 1) * n]);
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        c.par_chunks_mut(k)
            .zip(a.par_chunks(n))
            .for_each(|(crow, arow)| row(crow, arow));
    } else {
        for (crow, arow) in c.chunks_mut(k).zip(a.chunks(n)) {
            row(crow, arow);
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]  (A stored row-major [m,k])
///
/// Row p of C sums A[i,p] * B[i,:] over i in a fixed order, so the result does
/// not depend on how rows of C are distributed across workers.
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let row = |p: usize, crow: &mut [S]| {
        let mut i = 0;
        while i + 4 <= m {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for j in 0..n {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            i += 4;
        }
        while i < m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
            i += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, crow)| row(p, crow));
    } else {
        for (p, crow) in c.chunks_mut(n).enumerate() {
            row(p, crow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
    fn kernels_agree_with_naive_product() {
        let mut rng = crate::rng::Rng::new(11);
        for &(m, k, n) in &[
            (1, 1, 1),
            (3, 4, 5),
            (7, 2, 9),
            (5, 8, 3),
            (64, 33, 17),
            (9, 20, 31),
        ] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul_nn(&a, &b, &mut c, m, k, n);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-11));

            // nt: compute A * (B^T)^T by transposing b first
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            matmul_nt(&a, &bt, &mut c2, m, k, n);
            assert!(c2.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-11));

            // tn: compute (A^T)^T * B by transposing a first
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c3 = vec![0.0; m * n];
            matmul_tn(&at, &b, &mut c3, k, m, n);
            assert!(c3.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-11));
        }
    }

    #[test]
    fn dot8_matches_plain_sum() {
        let mut rng = crate::rng::Rng::new(12);
        for n in [0usize, 1, 7, 8, 9, 33, 256] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let want: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            assert!((dot8(&x, &y) - want).abs() < 1e-12, "n={n}");
        }
    }
}
