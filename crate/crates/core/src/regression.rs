//! Cross-sectional least-squares estimation of conditional expectations.
//!
//! The backward adjoint solvers need E[. | F_k] at every step; with Markov
//! state this is a regression of path values on a polynomial basis in the
//! current state. Columns are standardized and the Gram system is solved
//! through an eigenvalue pseudo-inverse, so degenerate states (all paths
//! equal) fall back to the cross-sectional mean instead of failing.

use crate::error::{Error, Result};
use crate::linalg;

/// Monomial basis in the state, all total degrees up to `degree`.
#[derive(Debug, Clone, Copy)]
pub struct RegressionBasis {
    pub degree: usize,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3 }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::IllConditionedRegression(
                "basis degree must be at least one".into(),
            ));
        }
        Ok(RegressionBasis { degree })
    }

    /// Multi-indices of all monomials in `dim` variables up to the degree.
    pub fn exponents(&self, dim: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![0u32; dim]];
        for _ in 0..self.degree {
            let mut next: Vec<Vec<u32>> = Vec::new();
            for e in &out {
                for d in 0..dim {
                    let mut e2 = e.clone();
                    e2[d] += 1;
                    if !next.contains(&e2) {
                        next.push(e2);
                    }
                }
            }
            for e in next {
                if !out.contains(&e) {
                    out.push(e);
                }
            }
        }
        out.sort();
        out
    }

    pub fn size(&self, dim: usize) -> usize {
        self.exponents(dim).len()
    }
}

/// Diagnostics from one cross-sectional fit.
#[derive(Debug, Clone, Copy)]
pub struct FitDiagnostics {
    /// Effective condition number of the (thresholded) Gram matrix.
    pub condition: f64,
    pub basis_size: usize,
}

/// Regress `values` on the basis in `states` (flat, `paths` rows of `dim`)
/// and return the fitted conditional expectation per path plus diagnostics.
pub fn regress_conditional(
    values: &[f64],
    states: &[f64],
    dim: usize,
    basis: &RegressionBasis,
) -> Result<(Vec<f64>, FitDiagnostics)> {
    let paths = values.len();
    if dim == 0 || states.len() != paths * dim {
        return Err(Error::DimensionMismatch(
            "state array does not match value count".into(),
        ));
    }
    let exps = basis.exponents(dim);
    let p = exps.len();
    if paths < 10 * (basis.degree + 1) {
        return Err(Error::IllConditionedRegression(format!(
            "regression needs at least {} paths for degree {}, got {paths}",
            10 * (basis.degree + 1),
            basis.degree
        )));
    }

    // standardize each state coordinate; constant columns get unit scale
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for row in 0..paths {
        for d in 0..dim {
            mean[d] += states[row * dim + d];
        }
    }
    for m in &mut mean {
        *m /= paths as f64;
    }
    for row in 0..paths {
        for d in 0..dim {
            let c = states[row * dim + d] - mean[d];
            var[d] += c * c;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / paths as f64).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();

    // accumulate Gram matrix and right-hand side in one pass
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut feat = vec![0.0; p];
    let mut z = vec![0.0; dim];
    let mut design: Vec<f64> = Vec::with_capacity(paths * p);
    for row in 0..paths {
        for d in 0..dim {
            z[d] = (states[row * dim + d] - mean[d]) / scale[d];
        }
        for (j, e) in exps.iter().enumerate() {
            let mut f = 1.0;
            for d in 0..dim {
                for _ in 0..e[d] {
                    f *= z[d];
                }
            }
            feat[j] = f;
        }
        design.extend_from_slice(&feat);
        let y = values[row];
        for a in 0..p {
            rhs[a] += feat[a] * y;
            for b in a..p {
                gram[a * p + b] += feat[a] * feat[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
    }

    let (beta, condition) = linalg::solve_gram_pinv(&gram, &rhs, p);
    let fitted: Vec<f64> = (0..paths)
        .map(|row| linalg::dot(&design[row * p..(row + 1) * p], &beta))
        .collect();
    Ok((
        fitted,
        FitDiagnostics {
            condition,
            basis_size: p,
        },
    ))
}
