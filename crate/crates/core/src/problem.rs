//! Problem definitions: dynamics, costs, control region, candidate controls
//! and perturbations, plus structural validation and exact coefficient
//! derivatives.

use crate::error::{Error, Result};
use crate::poly::{MultiIndex, PolyMap, Polynomial};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Which perturbation calculus applies to the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Convex combinations of admissible controls; machinery up to order two.
    Convex,
    /// Spike perturbations on small time sets; scalar machinery up to order
    /// four, restricted to one state and one control dimension.
    Needle,
}

impl Mode {
    /// Highest partial-derivative order the mode relies on.
    pub fn max_derivative_order(self) -> u32 {
        match self {
            Mode::Convex => 3,
            Mode::Needle => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Convex => "convex",
            Mode::Needle => "needle",
        }
    }
}

/// Admissible control region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlRegion {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Points(Vec<Vec<f64>>),
}

impl ControlRegion {
    pub fn dim(&self) -> usize {
        match self {
            ControlRegion::Box { lo, .. } => lo.len(),
            ControlRegion::Points(pts) => pts.first().map(|p| p.len()).unwrap_or(0),
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match self {
            ControlRegion::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(&v, (&l, &h))| v >= l - tol && v <= h + tol),
            ControlRegion::Points(pts) => pts.iter().any(|p| {
                p.iter()
                    .zip(u)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    <= tol.max(1e-12)
            }),
        }
    }

    /// Project a value into the region: componentwise clamp for boxes,
    /// nearest listed point (lowest index on ties) for finite regions.
    pub fn clamp(&self, u: &mut [f64]) {
        match self {
            ControlRegion::Box { lo, hi } => {
                for ((v, &l), &h) in u.iter_mut().zip(lo).zip(hi) {
                    *v = v.max(l).min(h);
                }
            }
            ControlRegion::Points(pts) => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (i, p) in pts.iter().enumerate() {
                    let d: f64 = p.iter().zip(u.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                u.copy_from_slice(&pts[best]);
            }
        }
    }

    /// Finite probe set: a grid over a box (per-dimension resolution), or the
    /// points themselves.
    pub fn probe_values(&self, per_dim: usize) -> Vec<Vec<f64>> {
        match self {
            ControlRegion::Points(pts) => pts.clone(),
            ControlRegion::Box { lo, hi } => {
                let m = lo.len();
                let k = per_dim.max(2);
                let mut out: Vec<Vec<f64>> = vec![Vec::new()];
                for d in 0..m {
                    let mut next = Vec::with_capacity(out.len() * k);
                    for base in &out {
                        for i in 0..k {
                            let frac = i as f64 / (k - 1) as f64;
                            let mut v = base.clone();
                            v.push(lo[d] + frac * (hi[d] - lo[d]));
                            next.push(v);
                        }
                    }
                    out = next;
                }
                out
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ControlRegion::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() {
                    return Err(Error::DimensionMismatch(
                        "control box bounds must be nonempty and equal length".into(),
                    ));
                }
                for (i, (&l, &h)) in lo.iter().zip(hi).enumerate() {
                    if !(l.is_finite() && h.is_finite()) {
                        return Err(Error::EmptyControlRegion(format!(
                            "box bound {i} is not finite; the region must be bounded"
                        )));
                    }
                    if l > h {
                        return Err(Error::EmptyControlRegion(format!(
                            "box component {i} has lo = {l} > hi = {h}"
                        )));
                    }
                }
                Ok(())
            }
            ControlRegion::Points(pts) => {
                if pts.is_empty() {
                    return Err(Error::EmptyControlRegion("empty point list".into()));
                }
                let m = pts[0].len();
                if m == 0 || pts.iter().any(|p| p.len() != m) {
                    return Err(Error::DimensionMismatch(
                        "control points must share a positive dimension".into(),
                    ));
                }
                if pts.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::EmptyControlRegion(
                        "control points must be finite".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// A coefficient field of the problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Drift,
    Diffusion,
    RunningCost,
    TerminalCost,
}

impl Coefficient {
    pub fn name(self) -> &'static str {
        match self {
            Coefficient::Drift => "drift",
            Coefficient::Diffusion => "diffusion",
            Coefficient::RunningCost => "running_cost",
            Coefficient::TerminalCost => "terminal_cost",
        }
    }
}

/// A stochastic control problem with polynomial data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub initial_state: Vec<f64>,
    pub drift: PolyMap,
    pub diffusion: PolyMap,
    pub running_cost: Polynomial,
    pub terminal_cost: Polynomial,
    pub control_region: ControlRegion,
    pub mode: Mode,
}

impl ProblemSpec {
    pub fn with_mode(&self, mode: Mode) -> ProblemSpec {
        let mut s = self.clone();
        s.mode = mode;
        s
    }

    /// Same problem with running and terminal costs scaled by `lambda`.
    pub fn with_cost_scaled(&self, lambda: f64) -> ProblemSpec {
        let mut s = self.clone();
        s.running_cost = self.running_cost.scaled(lambda);
        s.terminal_cost = self.terminal_cost.scaled(lambda);
        s
    }

    pub fn field(&self, which: Coefficient) -> Vec<&Polynomial> {
        match which {
            Coefficient::Drift => self.drift.components.iter().collect(),
            Coefficient::Diffusion => self.diffusion.components.iter().collect(),
            Coefficient::RunningCost => vec![&self.running_cost],
            Coefficient::TerminalCost => vec![&self.terminal_cost],
        }
    }

    /// Exact partial derivative of a coefficient field at (t, x, u).
    ///
    /// Returns one value per component of the field. Orders beyond what the
    /// problem mode guarantees are rejected even though the polynomial
    /// representation could go further.
    pub fn eval_coefficient(
        &self,
        which: Coefficient,
        derivative: &MultiIndex,
        t: f64,
        x: &[f64],
        u: &[f64],
    ) -> Result<Vec<f64>> {
        let limit = self.mode.max_derivative_order();
        if derivative.order() > limit {
            return Err(Error::OrderTooHigh {
                requested: derivative.order(),
                limit,
                mode: self.mode.name().into(),
            });
        }
        if derivative.x.len() != self.state_dim || derivative.u.len() != self.control_dim {
            return Err(Error::DimensionMismatch(
                "multi-index dimensions do not match the problem".into(),
            ));
        }
        if x.len() != self.state_dim || u.len() != self.control_dim {
            return Err(Error::DimensionMismatch(
                "evaluation point dimensions do not match the problem".into(),
            ));
        }
        Ok(self
            .field(which)
            .iter()
            .map(|p| p.diff(derivative).eval(t, x, u))
            .collect())
    }

    /// Spike differences of the scalar coefficients used by the needle
    /// variational systems: the value and x-derivatives of b and sigma at
    /// control `v` minus their values at `u_bar`.
    pub fn delta_coefficients(
        &self,
        t: f64,
        x: f64,
        u_bar: f64,
        v: f64,
    ) -> Result<DeltaCoefficients> {
        if self.state_dim != 1 || self.control_dim != 1 {
            return Err(Error::DimensionMismatch(
                "spike differences require one state and one control dimension".into(),
            ));
        }
        let b = &self.drift.components[0];
        let s = &self.diffusion.components[0];
        let xs = [x];
        let diff_at = |p: &Polynomial, ord: usize, uv: f64| {
            let mut q = p.clone();
            for _ in 0..ord {
                q = q.diff_x(0);
            }
            q.eval(t, &xs, &[uv])
        };
        let d = |p: &Polynomial, ord: usize| diff_at(p, ord, v) - diff_at(p, ord, u_bar);
        Ok(DeltaCoefficients {
            db: d(b, 0),
            dsigma: d(s, 0),
            db_x: d(b, 1),
            dsigma_x: d(s, 1),
            db_xx: d(b, 2),
            dsigma_xx: d(s, 2),
            dsigma_xxx: d(s, 3),
        })
    }

    /// Structural and numerical validation; see [`validate_spec`].
    pub fn validate(&self) -> Result<ValidationReport> {
        validate_spec(self)
    }
}

/// Spike differences of drift/diffusion derivatives, all exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaCoefficients {
    pub db: f64,
    pub dsigma: f64,
    pub db_x: f64,
    pub dsigma_x: f64,
    pub db_xx: f64,
    pub dsigma_xx: f64,
    pub dsigma_xxx: f64,
}

/// How the control is specified.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// Deterministic constant control.
    OpenLoopConstant(Vec<f64>),
    /// Deterministic node values, one control vector per grid node.
    OpenLoopGrid(Vec<Vec<f64>>),
    /// Polynomial feedback law k(t, x), clamped to the control region.
    Feedback(PolyMap),
}

/// Supplier for the near-diagonal Malliavin derivative of the control.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSupplier {
    /// The control has zero noise sensitivity (e.g. any deterministic law).
    Zero,
    /// Closed-form polynomial in (t, x) evaluated along the state.
    ClosedForm(PolyMap),
    /// Nothing is known; dependent checks report unavailable rather than guess.
    Unavailable,
}

/// A candidate control with its noise-gradient supplier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlLaw {
    pub kind: ControlKind,
    pub gradient: GradientSupplier,
}

impl ControlLaw {
    pub fn constant(values: Vec<f64>) -> Self {
        ControlLaw {
            kind: ControlKind::OpenLoopConstant(values),
            gradient: GradientSupplier::Zero,
        }
    }

    pub fn feedback(map: PolyMap) -> Self {
        ControlLaw {
            kind: ControlKind::Feedback(map),
            gradient: GradientSupplier::Unavailable,
        }
    }

    pub fn with_gradient(mut self, gradient: GradientSupplier) -> Self {
        self.gradient = gradient;
        self
    }

    pub fn is_feedback(&self) -> bool {
        matches!(self.kind, ControlKind::Feedback(_))
    }

    /// True when the control value does not depend on the realized path.
    pub fn is_deterministic(&self) -> bool {
        !self.is_feedback()
    }

    /// Control value at a node; feedback laws are clamped into the region.
    pub fn value_into(
        &self,
        t: f64,
        step: usize,
        x: &[f64],
        region: &ControlRegion,
        out: &mut [f64],
    ) {
        match &self.kind {
            ControlKind::OpenLoopConstant(v) => out.copy_from_slice(v),
            ControlKind::OpenLoopGrid(vals) => {
                let idx = step.min(vals.len().saturating_sub(1));
                out.copy_from_slice(&vals[idx]);
            }
            ControlKind::Feedback(map) => {
                map.eval_into(t, x, &[], out);
                region.clamp(out);
            }
        }
    }

    /// Check admissibility of open-loop values against the region.
    pub fn check_admissible(&self, region: &ControlRegion) -> Result<()> {
        let tol = 1e-9;
        match &self.kind {
            ControlKind::OpenLoopConstant(v) => {
                if !region.contains(v, tol) {
                    return Err(Error::InvalidProblem(format!(
                        "constant control {v:?} lies outside the control region"
                    )));
                }
            }
            ControlKind::OpenLoopGrid(vals) => {
                for (k, v) in vals.iter().enumerate() {
                    if !region.contains(v, tol) {
                        return Err(Error::InvalidProblem(format!(
                            "open-loop control at node {k} lies outside the control region"
                        )));
                    }
                }
            }
            ControlKind::Feedback(_) => {} // clamped by construction
        }
        Ok(())
    }
}

/// A perturbation of the candidate control.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// Convex direction v = u - u_bar for an admissible comparison control u,
    /// applied with magnitude epsilon in (0, 1).
    Convex {
        comparison: ControlLaw,
        epsilon: f64,
    },
    /// Spike to the fixed value v on a finite union of left-closed intervals.
    Needle {
        intervals: Vec<(f64, f64)>,
        value: Vec<f64>,
    },
}

impl PerturbationSpec {
    pub fn spike(t_bar: f64, width: f64, value: Vec<f64>) -> Self {
        PerturbationSpec::Needle {
            intervals: vec![(t_bar, t_bar + width)],
            value,
        }
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        match self {
            PerturbationSpec::Convex { comparison, epsilon } => {
                if !(*epsilon > 0.0 && *epsilon < 1.0) {
                    return Err(Error::InvalidProblem(format!(
                        "convex perturbation magnitude must lie in (0, 1), got {epsilon}"
                    )));
                }
                if matches!(spec.control_region, ControlRegion::Points(_)) {
                    return Err(Error::InvalidProblem(
                        "convex perturbations need a convex (box) control region".into(),
                    ));
                }
                comparison.check_admissible(&spec.control_region)
            }
            PerturbationSpec::Needle { intervals, value } => {
                if value.len() != spec.control_dim {
                    return Err(Error::DimensionMismatch(
                        "spike value dimension does not match the control".into(),
                    ));
                }
                if !spec.control_region.contains(value, 1e-9) {
                    return Err(Error::InvalidProblem(
                        "spike value lies outside the control region".into(),
                    ));
                }
                for &(a, b) in intervals {
                    if !(a >= 0.0 && b <= spec.horizon + 1e-12 && b >= a) {
                        return Err(Error::InvalidProblem(format!(
                            "spike interval [{a}, {b}) must lie inside [0, {}]",
                            spec.horizon
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Outcome of one validation check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Full validation report; `ok` is the conjunction of all checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub checks: Vec<ValidationCheck>,
}

const FD_POINTS: usize = 20;
const FD_REL_TOL: f64 = 1e-6;
const FD_SEED: u64 = 0x5350_4543; // fixed so reports are reproducible

/// Validate a problem: dimension consistency, control-region sanity, and
/// agreement of every first-order exact derivative with a central finite
/// difference of its parent at seeded random points.
pub fn validate_spec(spec: &ProblemSpec) -> Result<ValidationReport> {
    let mut checks = Vec::new();

    structural_checks(spec)?;
    checks.push(ValidationCheck {
        name: "dimensions".into(),
        passed: true,
        detail: format!(
            "n = {}, m = {}, mode = {}",
            spec.state_dim,
            spec.control_dim,
            spec.mode.name()
        ),
    });

    spec.control_region.validate()?;
    checks.push(ValidationCheck {
        name: "control_region".into(),
        passed: true,
        detail: "nonempty and bounded".into(),
    });

    derivative_checks(spec, &mut checks)?;

    Ok(ValidationReport { ok: true, checks })
}

fn structural_checks(spec: &ProblemSpec) -> Result<()> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    if n == 0 || m == 0 {
        return Err(Error::DimensionMismatch(
            "state and control dimensions must be positive".into(),
        ));
    }
    if spec.horizon <= 0.0 || spec.horizon.is_nan() {
        return Err(Error::DimensionMismatch(format!(
            "horizon must be positive, got {}",
            spec.horizon
        )));
    }
    if spec.initial_state.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {n}",
            spec.initial_state.len()
        )));
    }
    if spec.drift.out_dim() != n || spec.diffusion.out_dim() != n {
        return Err(Error::DimensionMismatch(
            "drift and diffusion must have one component per state dimension".into(),
        ));
    }
    if spec.mode == Mode::Needle && (n != 1 || m != 1) {
        return Err(Error::DimensionMismatch(format!(
            "needle mode requires n = m = 1, got n = {n}, m = {m}"
        )));
    }
    if spec.control_region.dim() != m {
        return Err(Error::DimensionMismatch(
            "control region dimension does not match the control".into(),
        ));
    }

    let all_polys = spec
        .drift
        .components
        .iter()
        .chain(&spec.diffusion.components)
        .chain(std::iter::once(&spec.running_cost))
        .chain(std::iter::once(&spec.terminal_cost));
    for p in all_polys {
        if p.state_dim != n || p.control_dim != m {
            return Err(Error::DimensionMismatch(
                "polynomial term dimensions do not match the problem".into(),
            ));
        }
        for term in &p.terms {
            if term.x_pows.len() != n || term.u_pows.len() != m {
                return Err(Error::DimensionMismatch(
                    "polynomial term power lists have wrong length".into(),
                ));
            }
        }
        if p.degree_xu() > 4 {
            return Err(Error::DimensionMismatch(format!(
                "coefficient total degree {} exceeds the supported degree 4",
                p.degree_xu()
            )));
        }
    }
    if spec.terminal_cost.depends_on_t() || spec.terminal_cost.depends_on_u() {
        return Err(Error::DimensionMismatch(
            "terminal cost must depend on the state only".into(),
        ));
    }
    Ok(())
}

fn derivative_checks(spec: &ProblemSpec, checks: &mut Vec<ValidationCheck>) -> Result<()> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let fields = [
        Coefficient::Drift,
        Coefficient::Diffusion,
        Coefficient::RunningCost,
        Coefficient::TerminalCost,
    ];
    let mut worst = 0.0_f64;
    for (fi, &which) in fields.iter().enumerate() {
        for pt in 0..FD_POINTS {
            let cell = (fi * FD_POINTS + pt) as u64;
            let t = rng::uniform_in(FD_SEED, cell, 0, 0.0, spec.horizon);
            let x: Vec<f64> = (0..n)
                .map(|i| rng::uniform_in(FD_SEED, cell, 1 + i as u64, -2.0, 2.0))
                .collect();
            let u: Vec<f64> = (0..m)
                .map(|j| rng::uniform_in(FD_SEED, cell, 64 + j as u64, -2.0, 2.0))
                .collect();
            for poly in spec.field(which) {
                for dir in 0..(n + m) {
                    let exact = if dir < n {
                        poly.diff_x(dir).eval(t, &x, &u)
                    } else {
                        poly.diff_u(dir - n).eval(t, &x, &u)
                    };
                    let h = 1e-5;
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    let (mut up, mut um) = (u.clone(), u.clone());
                    if dir < n {
                        xp[dir] += h;
                        xm[dir] -= h;
                    } else {
                        up[dir - n] += h;
                        um[dir - n] -= h;
                    }
                    let fd = (poly.eval(t, &xp, &up) - poly.eval(t, &xm, &um)) / (2.0 * h);
                    let scale = exact.abs().max(fd.abs()).max(1.0);
                    let rel = (exact - fd).abs() / scale;
                    worst = worst.max(rel);
                    if rel > FD_REL_TOL {
                        let mut point = vec![t];
                        point.extend_from_slice(&x);
                        point.extend_from_slice(&u);
                        return Err(Error::DerivativeInconsistency {
                            field: which.name().into(),
                            direction: if dir < n {
                                format!("x{dir}")
                            } else {
                                format!("u{}", dir - n)
                            },
                            error: rel,
                            point,
                        });
                    }
                }
            }
        }
    }
    checks.push(ValidationCheck {
        name: "derivative_consistency".into(),
        passed: true,
        detail: format!(
            "central differences agree at {FD_POINTS} points per field; worst relative error {worst:.2e}"
        ),
    });
    Ok(())
}
