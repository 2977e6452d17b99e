//! Dense f32 matrix kernels.
//!
//! Three layouts cover every product the tape needs, forward and backward:
//! plain, B-transposed, A-transposed. Loop orders are chosen so the inner
//! loop runs over contiguous rows and autovectorizes.

/// out[m x n] = a[m x k] . b[k x n]
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] = a[m x k] . b[n x k]^T
pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k x n] = a[m x k]^T . b[m x n]
pub fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with four accumulators for instruction-level parallelism.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut rest = 0.0f32;
    for i in chunks * 4..a.len() {
        rest += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + rest
}

/// y += alpha * x
pub fn axpy(y: &mut [f32], x: &[f32], alpha: f32) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 4];
        matmul(&eye, &x, &mut out, 2, 2, 2);
        assert_eq!(out, x);
    }

    #[test]
    fn row_times_column() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut out = [0.0];
        matmul(&a, &b, &mut out, 1, 2, 1);
        assert_eq!(out, [11.0]);
    }

    #[test]
    fn layouts_agree_with_naive() {
        let mut state = 0x1234_5678u64;
        let mut next = move || {
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (4, 4, 4), (7, 3, 9)] {
            let a: Vec<f32> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f32> = (0..k * n).map(|_| next()).collect();
            let want = naive(&a, &b, m, k, n);

            let mut got = vec![0.0; m * n];
            matmul(&a, &b, &mut got, m, k, n);
            assert_eq!(got, want);

            // nt: rebuild b transposed so a . (b_t)^T == a . b
            let mut b_t = vec![0.0; n * k];
            for r in 0..k {
                for c in 0..n {
                    b_t[c * k + r] = b[r * n + c];
                }
            }
            let mut got_nt = vec![0.0; m * n];
            matmul_nt(&a, &b_t, &mut got_nt, m, k, n);
            for (g, w) in got_nt.iter().zip(&want) {
                assert!((g - w).abs() < 1e-5);
            }

            // tn: (a_t)^T . b == a . b
            let mut a_t = vec![0.0; k * m];
            for r in 0..m {
                for c in 0..k {
                    a_t[c * m + r] = a[r * k + c];
                }
            }
            let mut got_tn = vec![0.0; m * n];
            matmul_tn(&a_t, &b, &mut got_tn, k, m, n);
            for (g, w) in got_tn.iter().zip(&want) {
                assert!((g - w).abs() < 1e-5);
            }
        }
    }
}
