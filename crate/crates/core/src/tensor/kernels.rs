// Dense matmul kernels over row-major buffers, accumulating into `out`.

const MR: usize = 4;
const NR: usize = 8;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    let n_full = n - n % NR;
    let mut i0 = 0;
    while i0 + MR <= m {
        let mut j0 = 0;
        while j0 < n_full {
            block_full(a, b, out, i0, j0, k, n);
            j0 += NR;
        }
        if n_full < n {
            block_tail(a, b, out, i0, MR, n_full, k, n);
        }
        i0 += MR;
    }
    if i0 < m {
        block_tail(a, b, out, i0, m - i0, 0, k, n);
    }
}

#[inline(always)]
fn block_full(a: &[f64], b: &[f64], out: &mut [f64], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    for p in 0..k {
        let bp: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
        for r in 0..MR {
            let av = rows[r][p];
            for c in 0..NR {
                acc[r][c] += av * bp[c];
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
        for c in 0..NR {
            o[c] += acc_r[c];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn block_tail(a: &[f64], b: &[f64], out: &mut [f64], i0: usize, rows: usize, j0: usize, k: usize, n: usize) {
    let width = n - j0;
    let mut acc = vec![0.0f64; width];
    for i in i0..i0 + rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n + j0..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        for (o, v) in out[i * n + j0..(i + 1) * n].iter_mut().zip(&acc) {
            *o += v;
        }
    }
}

fn transposed(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for (j, &v) in x[i * cols..(i + 1) * cols].iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transposed(&b[..n * k], n, k);
    matmul_nn(a, &bt, out, m, k, n);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let at = transposed(&a[..m * k], m, k);
    matmul_nn(&at, b, out, k, m, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
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
    fn kernels_agree_with_naive() {
        for (m, k, n) in [(5, 7, 3), (8, 5, 16), (9, 13, 19), (1, 1, 1), (4, 3, 8)] {
            check(m, k, n);
        }
        let mut out = vec![1.0; 4];
        matmul_nn(&[1.0, 2.0], &[3.0, 4.0], &mut out, 2, 1, 2);
        assert_eq!(out, vec![4.0, 5.0, 7.0, 9.0]);
    }

    fn check(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut got, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut got = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut got, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut got = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut got, k, m, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
