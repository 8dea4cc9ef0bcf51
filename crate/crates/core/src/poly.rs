//! Multivariate polynomials in (t, x, u) with exact differentiation.
//!
//! Coefficients of the dynamics and costs are restricted to polynomials so
//! that every partial derivative up to order four exists in closed form.
//! A polynomial is a flat list of terms `c * t^a * prod x_i^{b_i} * prod
//! u_j^{c_j}`; differentiation maps term lists to term lists and evaluation
//! is a direct sum over terms.

use serde::{Deserialize, Serialize};

/// One monomial term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    #[serde(rename = "c")]
    pub coef: f64,
    #[serde(rename = "t", default)]
    pub t_pow: u32,
    #[serde(rename = "x", default)]
    pub x_pows: Vec<u32>,
    #[serde(rename = "u", default)]
    pub u_pows: Vec<u32>,
}

/// Polynomial in (t, x, u) with fixed state and control dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub state_dim: usize,
    pub control_dim: usize,
    pub terms: Vec<Term>,
}

/// Partial-derivative multi-index over (x, u).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndex {
    pub x: Vec<u32>,
    pub u: Vec<u32>,
}

impl MultiIndex {
    pub fn zero(n: usize, m: usize) -> Self {
        MultiIndex {
            x: vec![0; n],
            u: vec![0; m],
        }
    }

    pub fn x_only(n: usize, m: usize, idx: &[usize]) -> Self {
        let mut mi = Self::zero(n, m);
        for &i in idx {
            mi.x[i] += 1;
        }
        mi
    }

    pub fn u_only(n: usize, m: usize, idx: &[usize]) -> Self {
        let mut mi = Self::zero(n, m);
        for &j in idx {
            mi.u[j] += 1;
        }
        mi
    }

    pub fn order(&self) -> u32 {
        self.x.iter().sum::<u32>() + self.u.iter().sum::<u32>()
    }
}

impl Polynomial {
    pub fn zero(state_dim: usize, control_dim: usize) -> Self {
        Polynomial {
            state_dim,
            control_dim,
            terms: Vec::new(),
        }
    }

    pub fn constant(state_dim: usize, control_dim: usize, c: f64) -> Self {
        let mut p = Self::zero(state_dim, control_dim);
        if c != 0.0 {
            p.terms.push(Term {
                coef: c,
                t_pow: 0,
                x_pows: vec![0; state_dim],
                u_pows: vec![0; control_dim],
            });
        }
        p
    }

    /// Builder: add `c * t^tp * x^xp * u^up`.
    pub fn term(mut self, coef: f64, t_pow: u32, x_pows: &[u32], u_pows: &[u32]) -> Self {
        assert_eq!(x_pows.len(), self.state_dim, "x power length");
        assert_eq!(u_pows.len(), self.control_dim, "u power length");
        self.terms.push(Term {
            coef,
            t_pow,
            x_pows: x_pows.to_vec(),
            u_pows: u_pows.to_vec(),
        });
        self
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coef == 0.0)
    }

    /// Total degree in (x, u); zero for a constant or empty polynomial.
    pub fn degree_xu(&self) -> u32 {
        self.terms
            .iter()
            .filter(|t| t.coef != 0.0)
            .map(|t| t.x_pows.iter().sum::<u32>() + t.u_pows.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn depends_on_t(&self) -> bool {
        self.terms.iter().any(|t| t.coef != 0.0 && t.t_pow > 0)
    }

    pub fn depends_on_u(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.coef != 0.0 && t.u_pows.iter().any(|&p| p > 0))
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.state_dim);
        debug_assert_eq!(u.len(), self.control_dim);
        let mut acc = 0.0;
        for term in &self.terms {
            let mut v = term.coef;
            if term.t_pow > 0 {
                v *= t.powi(term.t_pow as i32);
            }
            for (xi, &p) in x.iter().zip(&term.x_pows) {
                if p > 0 {
                    v *= xi.powi(p as i32);
                }
            }
            for (uj, &p) in u.iter().zip(&term.u_pows) {
                if p > 0 {
                    v *= uj.powi(p as i32);
                }
            }
            acc += v;
        }
        acc
    }

    /// Exact partial derivative with respect to state component `i`.
    pub fn diff_x(&self, i: usize) -> Polynomial {
        assert!(i < self.state_dim);
        let terms = self
            .terms
            .iter()
            .filter(|t| t.x_pows[i] > 0)
            .map(|t| {
                let mut d = t.clone();
                d.coef = t.coef * t.x_pows[i] as f64;
                d.x_pows[i] -= 1;
                d
            })
            .collect();
        Polynomial {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            terms,
        }
    }

    /// Exact partial derivative with respect to control component `j`.
    pub fn diff_u(&self, j: usize) -> Polynomial {
        assert!(j < self.control_dim);
        let terms = self
            .terms
            .iter()
            .filter(|t| t.u_pows[j] > 0)
            .map(|t| {
                let mut d = t.clone();
                d.coef = t.coef * t.u_pows[j] as f64;
                d.u_pows[j] -= 1;
                d
            })
            .collect();
        Polynomial {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            terms,
        }
    }

    /// Repeated differentiation along a full multi-index.
    pub fn diff(&self, mi: &MultiIndex) -> Polynomial {
        let mut p = self.clone();
        for (i, &k) in mi.x.iter().enumerate() {
            for _ in 0..k {
                p = p.diff_x(i);
            }
        }
        for (j, &k) in mi.u.iter().enumerate() {
            for _ in 0..k {
                p = p.diff_u(j);
            }
        }
        p
    }

    /// Drop explicitly zero terms and merge duplicates; used after round trips.
    pub fn simplified(&self) -> Polynomial {
        let mut out: Vec<Term> = Vec::new();
        for t in &self.terms {
            if t.coef == 0.0 {
                continue;
            }
            if let Some(existing) = out
                .iter_mut()
                .find(|e| e.t_pow == t.t_pow && e.x_pows == t.x_pows && e.u_pows == t.u_pows)
            {
                existing.coef += t.coef;
            } else {
                out.push(t.clone());
            }
        }
        out.retain(|t| t.coef != 0.0);
        Polynomial {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            terms: out,
        }
    }

    /// Scale every coefficient by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Polynomial {
        let mut p = self.clone();
        for t in &mut p.terms {
            t.coef *= lambda;
        }
        p
    }
}

/// Vector-valued polynomial map (one polynomial per output component).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyMap {
    pub components: Vec<Polynomial>,
}

impl PolyMap {
    pub fn new(components: Vec<Polynomial>) -> Self {
        PolyMap { components }
    }

    pub fn zero(out_dim: usize, state_dim: usize, control_dim: usize) -> Self {
        PolyMap {
            components: (0..out_dim)
                .map(|_| Polynomial::zero(state_dim, control_dim))
                .collect(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval_into(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.components.len());
        for (o, p) in out.iter_mut().zip(&self.components) {
            *o = p.eval(t, x, u);
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.components.len()];
        self.eval_into(t, x, u, &mut out);
        out
    }

    /// Jacobian with respect to x as a row-major out_dim-by-state_dim matrix
    /// of polynomials, flattened row-major.
    pub fn jacobian_x(&self) -> Vec<Polynomial> {
        let n_x = self
            .components
            .first()
            .map(|p| p.state_dim)
            .unwrap_or(0);
        let mut out = Vec::with_capacity(self.components.len() * n_x);
        for p in &self.components {
            for i in 0..n_x {
                out.push(p.diff_x(i));
            }
        }
        out
    }

    pub fn jacobian_u(&self) -> Vec<Polynomial> {
        let n_u = self
            .components
            .first()
            .map(|p| p.control_dim)
            .unwrap_or(0);
        let mut out = Vec::with_capacity(self.components.len() * n_u);
        for p in &self.components {
            for j in 0..n_u {
                out.push(p.diff_u(j));
            }
        }
        out
    }

    pub fn scaled(&self, lambda: f64) -> PolyMap {
        PolyMap {
            components: self.components.iter().map(|p| p.scaled(lambda)).collect(),
        }
    }
}

/// Evaluate a flat row-major matrix of polynomials into `out`.
pub fn eval_poly_matrix(polys: &[Polynomial], t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
    debug_assert_eq!(polys.len(), out.len());
    for (o, p) in out.iter_mut().zip(polys) {
        *o = p.eval(t, x, u);
    }
}
