//! Plain loops over row-major slices. All reductions run in a fixed order so
//! results are bit-reproducible.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Numerically stable softmax of one row, restricted to `allowed` columns.
/// Disallowed columns get exactly zero probability.
pub fn softmax_row(input: &[f64], out: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in input.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(input).enumerate() {
        *o = if allowed(j) { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// Log-sum-exp of a row.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);
        // bᵀ stored as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut nt, m, k, n);
        // aᵀ stored as [k,m]; gemm_tn(aᵀᵀ) = a · b
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut tn, k, m, n);
        for i in 0..m * n {
            assert!((naive[i] - nn[i]).abs() < 1e-12);
            assert!((naive[i] - nt[i]).abs() < 1e-12);
            assert!((naive[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut out = [0.0; 3];
        softmax_row(&[1.0, 5.0, 1.0], &mut out, |j| j != 1);
        assert_eq!(out, [0.5, 0.0, 0.5]);
    }
}
