//! Small dense linear algebra on row-major `&[f64]` buffers.
//!
//! State and control dimensions are tiny (rarely above 4), so hand-rolled
//! kernels beat pulling in a matrix library and keep every operation
//! allocation-explicit.

/// y = A x for an n-by-m row-major matrix.
pub fn mat_vec(a: &[f64], x: &[f64], n: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(x.len(), m);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let row = &a[i * m..(i + 1) * m];
        let mut acc = 0.0;
        for j in 0..m {
            acc += row[j] * x[j];
        }
        y[i] = acc;
    }
    y
}

/// C = A B, with A n-by-k and B k-by-m, all row-major.
pub fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += ail * b[l * m + j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    a
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Gauss-Jordan inverse with partial pivoting. Returns (inverse, det).
pub fn invert(a: &[f64], n: usize) -> Option<(Vec<f64>, f64)> {
    let mut m = a.to_vec();
    let mut inv = identity(n);
    let mut det = 1.0;
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in (col + 1)..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
            det = -det;
        }
        let d = m[col * n + col];
        det *= d;
        let inv_d = 1.0 / d;
        for j in 0..n {
            m[col * n + j] *= inv_d;
            inv[col * n + j] *= inv_d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Some((inv, det))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns (eigenvalues, eigenvectors) with eigenvectors stored as columns
/// of the returned row-major matrix. Deterministic sweep order.
pub fn sym_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = identity(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
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
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| m[i * n + i]).collect();
    (vals, v)
}

fn frobenius(a: &[f64], n: usize) -> f64 {
    a.iter().take(n * n).map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimum-norm least-squares solve of (A^T A) beta = A^T y via the
/// eigendecomposition of the Gram matrix, thresholding small eigenvalues.
///
/// Returns (beta, effective condition number). `gram` is p-by-p symmetric,
/// `rhs` has length p.
pub fn solve_gram_pinv(gram: &[f64], rhs: &[f64], p: usize) -> (Vec<f64>, f64) {
    let (vals, vecs) = sym_eig(gram, p);
    let max_ev = vals.iter().cloned().fold(0.0_f64, f64::max);
    let tol = max_ev * 1e-12;
    let mut beta = vec![0.0; p];
    let mut min_kept = f64::INFINITY;
    for k in 0..p {
        let lam = vals[k];
        if lam <= tol {
            continue;
        }
        min_kept = min_kept.min(lam);
        // projection of rhs onto eigenvector k
        let mut proj = 0.0;
        for i in 0..p {
            proj += vecs[i * p + k] * rhs[i];
        }
        let scale = proj / lam;
        for i in 0..p {
            beta[i] += scale * vecs[i * p + k];
        }
    }
    let cond = if min_kept.is_finite() && min_kept > 0.0 {
        max_ev / min_kept
    } else {
        f64::INFINITY
    };
    (beta, cond)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invert_2x2() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let (inv, det) = invert(&a, 2).unwrap();
        assert!((det - 5.0).abs() < 1e-12);
        let prod = mat_mul(&a, &inv, 2, 2, 2);
        for (k, &v) in prod.iter().enumerate() {
            let want = if k % 3 == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_singular() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(invert(&a, 2).is_none());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.25, 0.5, 0.25, 2.0];
        let (vals, vecs) = sym_eig(&a, 3);
        // reconstruct A = V diag V^T
        let mut recon = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    recon[i * 3 + j] += vecs[i * 3 + k] * vals[k] * vecs[j * 3 + k];
                }
            }
        }
        for k in 0..9 {
            assert!((recon[k] - a[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_pinv_handles_rank_deficiency() {
        // gram for design [1, 0] columns: second column identically zero
        let gram = [4.0, 0.0, 0.0, 0.0];
        let rhs = [8.0, 0.0];
        let (beta, _cond) = solve_gram_pinv(&gram, &rhs, 2);
        assert!((beta[0] - 2.0).abs() < 1e-12);
        assert!(beta[1].abs() < 1e-12);
    }
}
