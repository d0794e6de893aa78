//! Small dense symmetric linear algebra: Cholesky inversion with a Jacobi
//! eigendecomposition pseudo-inverse fallback.

/// Cholesky factor L of a symmetric positive-definite matrix (row-major
/// `n x n`), or None when the matrix is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    // Solve L L^T X = I column by column.
    let mut inv = vec![0.0f64; n * n];
    let mut col = vec![0.0f64; n];
    for c in 0..n {
        // Forward: L y = e_c.
        for i in 0..n {
            let mut sum = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= l[i * n + k] * col[k];
            }
            col[i] = sum / l[i * n + i];
        }
        // Backward: L^T x = y.
        for i in (0..n).rev() {
            let mut sum = col[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * col[k];
            }
            col[i] = sum / l[i * n + i];
        }
        for i in 0..n {
            inv[i * n + c] = col[i];
        }
    }
    Some(inv)
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns (eigenvalues,
/// row-major eigenvector matrix V with rows as eigenvectors).
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[p * n + k];
                    let vkq = v[q * n + k];
                    v[p * n + k] = c * vkp - s * vkq;
                    v[q * n + k] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eigenvalues, v)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix.
pub fn sym_pseudo_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigh(a, n);
    let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = max_abs * 1e-12;
    let mut inv = vec![0.0f64; n * n];
    for (e, val) in vals.iter().enumerate() {
        if val.abs() <= cutoff {
            continue;
        }
        let row = &vecs[e * n..(e + 1) * n];
        for i in 0..n {
            for j in 0..n {
                inv[i * n + j] += row[i] * row[j] / val;
            }
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    out[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn spd_inverse_times_matrix_is_identity() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = spd_inverse(&a, 3).unwrap();
        let prod = matmul(&a, &inv, 3);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&a, 2).is_none());
    }

    #[test]
    fn pseudo_inverse_handles_singular() {
        // Rank-1 matrix vv^T with v = (1, 2).
        let a = vec![1.0, 2.0, 2.0, 4.0];
        let pinv = sym_pseudo_inverse(&a, 2);
        // A pinv A = A.
        let ap = matmul(&a, &pinv, 2);
        let apa = matmul(&ap, &a, 2);
        for i in 0..4 {
            assert!((apa[i] - a[i]).abs() < 1e-9, "idx {i}");
        }
    }

    #[test]
    fn jacobi_recovers_known_eigenvalues() {
        let a = vec![2.0, 1.0, 1.0, 2.0];
        let (mut vals, _) = jacobi_eigh(&a, 2);
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[0] - 1.0).abs() < 1e-10);
        assert!((vals[1] - 3.0).abs() < 1e-10);
    }
}
