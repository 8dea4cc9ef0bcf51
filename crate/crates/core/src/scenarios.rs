//! Built-in verification problems with closed-form ground truth.
//!
//! Each scenario couples a problem and candidate control with whatever is
//! known in closed form: adjoint pairs, the mixed second-variation kernel,
//! its noise gradient, and the exact state path where one exists. Tests and
//! the acceptance suite read their frozen expectations from here, and the
//! closed forms are themselves cross-checked against the solvers at load
//! time so oracle drift is caught early.

use crate::adjoint::{AdjointChain, AdjointPair, AdjointSolution};
use crate::error::{Error, Result};
use crate::poly::{PolyMap, Polynomial};
use crate::problem::{ControlLaw, ControlRegion, Mode, PerturbationSpec, ProblemSpec};
use crate::sim::{
    pathwise_cost, simulate_state, simulate_state_perturbed, Grid2, SimulationContext,
    StateEnsemble,
};
use crate::stats::{order_fit, Accumulator, OrderFit, Stat};
use std::sync::Arc;

/// Scalar field (t, x) -> value along the candidate trajectory.
pub type StateField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Closed-form adjoint pair for a scalar problem.
#[derive(Clone)]
pub struct AdjointForm {
    pub p: StateField,
    pub q: StateField,
}

impl AdjointForm {
    fn constant(p: f64) -> Self {
        AdjointForm {
            p: Arc::new(move |_, _| p),
            q: Arc::new(|_, _| 0.0),
        }
    }
}

/// Whatever ground truth a scenario carries (all scalar problems).
#[derive(Clone, Default)]
pub struct ClosedForms {
    pub adjoints: [Option<AdjointForm>; 4],
    /// Mixed second-variation kernel S(t, x).
    pub s_kernel: Option<StateField>,
    /// Noise gradient of S near the diagonal.
    pub nabla_s: Option<StateField>,
    /// Exact terminal state given (W path sum, horizon); used for strong
    /// convergence studies.
    pub exact_state: Option<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>,
}

/// A named problem + candidate + ground truth + declared statuses.
#[derive(Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub spec: ProblemSpec,
    pub control: ControlLaw,
    pub closed: ClosedForms,
    pub optimal: Option<bool>,
    pub classically_singular: Option<bool>,
    pub pontryagin_singular: Option<bool>,
}

impl Scenario {
    /// Same scenario with the spike machinery enabled (requires n = m = 1).
    pub fn as_needle(&self) -> Scenario {
        let mut s = self.clone();
        s.spec = self.spec.with_mode(Mode::Needle);
        s
    }

    /// Materialize a closed-form adjoint pair on the grid of an ensemble.
    pub fn closed_adjoint(
        &self,
        order: usize,
        state: &StateEnsemble,
        ctx: &SimulationContext,
    ) -> Result<AdjointSolution> {
        let form = self.closed.adjoints[order - 1].as_ref().ok_or_else(|| {
            Error::Unavailable(format!(
                "scenario {} has no closed-form adjoint of order {order}",
                self.name
            ))
        })?;
        let nodes = ctx.steps + 1;
        let mut p = Grid2::zeros(state.paths(), nodes, 1);
        let mut q = Grid2::zeros(state.paths(), nodes, 1);
        for path in 0..state.paths() {
            for k in 0..nodes {
                let t = ctx.time(k.min(ctx.steps));
                let x = state.values.at(path, k)[0];
                p.set_scalar(path, k, (form.p)(t, x));
                if k < ctx.steps {
                    q.set_scalar(path, k, (form.q)(t, x));
                }
            }
        }
        let terminal_mean = {
            let mut acc = 0.0;
            for path in 0..state.paths() {
                acc += p.scalar(path, ctx.steps);
            }
            vec![acc / state.paths() as f64]
        };
        Ok(AdjointSolution {
            order: order as u8,
            dim: 1,
            p,
            q,
            backend: "closed_form".into(),
            terminal_mean,
            condition: None,
        })
    }

    /// Closed-form first/second pair, materialized.
    pub fn closed_pair(&self, state: &StateEnsemble, ctx: &SimulationContext) -> Result<AdjointPair> {
        Ok(AdjointPair {
            first: self.closed_adjoint(1, state, ctx)?,
            second: self.closed_adjoint(2, state, ctx)?,
        })
    }

    /// Closed-form chain of all four orders, materialized.
    pub fn closed_chain(&self, state: &StateEnsemble, ctx: &SimulationContext) -> Result<AdjointChain> {
        Ok([
            self.closed_adjoint(1, state, ctx)?,
            self.closed_adjoint(2, state, ctx)?,
            self.closed_adjoint(3, state, ctx)?,
            self.closed_adjoint(4, state, ctx)?,
        ])
    }

    /// Cheap consistency audit of the supplied closed forms: terminal values
    /// must match the cost derivatives exactly, and where the analytic
    /// backend applies its output must agree node-wise to 1e-10.
    pub fn self_check(&self) -> Result<()> {
        let ctx = crate::sim::make_context(self.spec.horizon, 64, 4, 0xC0FFEE);
        let state = simulate_state(&self.spec, &self.control, &ctx)?;
        for order in 1..=4usize {
            let Some(form) = self.closed.adjoints[order - 1].as_ref() else {
                continue;
            };
            for path in 0..state.paths() {
                let x_t = state.values.at(path, ctx.steps)[0];
                let mut h = self.spec.terminal_cost.clone();
                for _ in 0..order {
                    h = h.diff_x(0);
                }
                let want = -h.eval(0.0, &[x_t], &[0.0]);
                let got = (form.p)(self.spec.horizon, x_t);
                if (want - got).abs() > 1e-10 {
                    return Err(Error::Unavailable(format!(
                        "scenario {}: closed-form order-{order} terminal value {got} != {want}",
                        self.name
                    )));
                }
            }
        }
        // backward-equation residual where the analytic backend applies
        if let Ok(pair) = crate::adjoint::solve_convex_pair(
            &self.spec,
            &state,
            &ctx,
            crate::adjoint::Backend::Analytic,
        ) {
            for k in 0..=ctx.steps {
                let t = ctx.time(k);
                let x = state.values.at(0, k)[0];
                for (form, solved) in [(&self.closed.adjoints[0], &pair.first), (&self.closed.adjoints[1], &pair.second)] {
                    if let Some(f) = form {
                        let gap = ((f.p)(t, x) - solved.p_at(0, k)[0]).abs();
                        if gap > 1e-10 {
                            return Err(Error::Unavailable(format!(
                                "scenario {}: closed-form order-{} adjoint deviates from the analytic backend by {gap:.2e} at node {k}",
                                self.name, solved.order
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// polynomial shorthands (all scalar problems)
// ---------------------------------------------------------------------------

fn poly() -> Polynomial {
    Polynomial::zero(1, 1)
}

fn p_zero() -> Polynomial {
    poly()
}

/// c * t^a x^b u^c as a single-term polynomial.
fn p_term(c: f64, t: u32, x: u32, u: u32) -> Polynomial {
    poly().term(c, t, &[x], &[u])
}

fn box_region(lo: f64, hi: f64) -> ControlRegion {
    ControlRegion::Box {
        lo: vec![lo],
        hi: vec![hi],
    }
}

fn scalar_spec(
    horizon: f64,
    x0: f64,
    drift: Polynomial,
    diffusion: Polynomial,
    running: Polynomial,
    terminal: Polynomial,
    region: ControlRegion,
) -> ProblemSpec {
    ProblemSpec {
        state_dim: 1,
        control_dim: 1,
        horizon,
        initial_state: vec![x0],
        drift: PolyMap::new(vec![drift]),
        diffusion: PolyMap::new(vec![diffusion]),
        running_cost: running,
        terminal_cost: terminal,
        control_region: region,
        mode: Mode::Convex,
    }
}

// ---------------------------------------------------------------------------
// the scenarios
// ---------------------------------------------------------------------------

/// Null problem: zero costs, everything vanishes, every control is singular
/// in both senses.
fn null_scenario() -> Scenario {
    let spec = scalar_spec(
        1.0,
        0.0,
        p_term(1.0, 0, 0, 1), // b = u
        p_term(1.0, 0, 0, 1), // sigma = u
        p_zero(),
        p_zero(),
        box_region(-1.0, 1.0),
    );
    let zero = AdjointForm::constant(0.0);
    Scenario {
        name: "NULL",
        description: "zero costs; all adjoints vanish and every control is singular",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(zero.clone()),
                Some(zero.clone()),
                Some(zero.clone()),
                Some(zero),
            ],
            s_kernel: Some(Arc::new(|_, _| 0.0)),
            nabla_s: Some(Arc::new(|_, _| 0.0)),
            exact_state: None,
        },
        optimal: Some(true),
        classically_singular: Some(true),
        pontryagin_singular: Some(true),
    }
}

/// Deterministic singular candidate: b = u, sigma = 0, f = x^2, h = 0,
/// x0 = 0, u_bar = 0. Classically and maximum-principle singular, with
/// P2(t) = -2 (T - t) in closed form.
fn sing_det() -> Scenario {
    let horizon = 1.0;
    let spec = scalar_spec(
        horizon,
        0.0,
        p_term(1.0, 0, 0, 1),
        p_zero(),
        p_term(1.0, 0, 2, 0),
        p_zero(),
        box_region(-1.0, 1.0),
    );
    Scenario {
        name: "SING-DET",
        description: "deterministic singular candidate with linear-in-control drift and quadratic running cost",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm::constant(0.0)),
                Some(AdjointForm {
                    p: Arc::new(move |t, _| -2.0 * (horizon - t)),
                    q: Arc::new(|_, _| 0.0),
                }),
                Some(AdjointForm::constant(0.0)),
                Some(AdjointForm::constant(0.0)),
            ],
            s_kernel: Some(Arc::new(move |t, _| -2.0 * (horizon - t))),
            nabla_s: Some(Arc::new(|_, _| 0.0)),
            exact_state: None,
        },
        optimal: Some(true),
        classically_singular: Some(true),
        pontryagin_singular: Some(true),
    }
}

/// Time-weighted variant of SING-DET (f = (1 + t) x^2). Still singular and
/// deterministic, but the order-2 driver varies in time, so plain backward
/// recursions show their first-order bias against the closed form
/// P2(t) = -(2 (T - t) + T^2 - t^2).
fn sing_det_t() -> Scenario {
    let horizon = 1.0;
    let running = poly().term(1.0, 0, &[2], &[0]).term(1.0, 1, &[2], &[0]);
    let spec = scalar_spec(
        horizon,
        0.0,
        p_term(1.0, 0, 0, 1),
        p_zero(),
        running,
        p_zero(),
        box_region(-1.0, 1.0),
    );
    Scenario {
        name: "SING-DET-T",
        description: "singular candidate with time-weighted running cost; exposes first-order recursion bias",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm::constant(0.0)),
                Some(AdjointForm {
                    p: Arc::new(move |t, _| {
                        -(2.0 * (horizon - t) + horizon * horizon - t * t)
                    }),
                    q: Arc::new(|_, _| 0.0),
                }),
                Some(AdjointForm::constant(0.0)),
                Some(AdjointForm::constant(0.0)),
            ],
            s_kernel: Some(Arc::new(move |t, _| {
                -(2.0 * (horizon - t) + horizon * horizon - t * t)
            })),
            nabla_s: Some(Arc::new(|_, _| 0.0)),
            exact_state: None,
        },
        optimal: Some(true),
        classically_singular: Some(true),
        pontryagin_singular: Some(true),
    }
}

/// First-order singular but not classically singular: b = 0, sigma = u,
/// h = x^2. The augmented second derivative is P2 = -2.
fn nonsing_diff() -> Scenario {
    let spec = scalar_spec(
        1.0,
        1.0,
        p_zero(),
        p_term(1.0, 0, 0, 1),
        p_zero(),
        p_term(1.0, 0, 2, 0),
        box_region(-1.0, 1.0),
    );
    let x0 = 1.0;
    Scenario {
        name: "NONSING-DIFF",
        description: "control in the diffusion with quadratic terminal cost; first-order singular, augmented second derivative -2",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm::constant(-2.0 * x0)),
                Some(AdjointForm::constant(-2.0)),
                Some(AdjointForm::constant(0.0)),
                Some(AdjointForm::constant(0.0)),
            ],
            s_kernel: Some(Arc::new(|_, _| 0.0)),
            nabla_s: Some(Arc::new(|_, _| 0.0)),
            exact_state: None,
        },
        optimal: Some(true),
        classically_singular: Some(false),
        pontryagin_singular: Some(false),
    }
}

/// Candidate violating the maximum principle: b = u, sigma = 1, f = u^2,
/// candidate u_bar = 1. The increment at v = 0 equals +1.
fn violator() -> Scenario {
    let spec = scalar_spec(
        1.0,
        0.0,
        p_term(1.0, 0, 0, 1),
        Polynomial::constant(1, 1, 1.0),
        p_term(1.0, 0, 0, 2),
        p_zero(),
        box_region(-1.0, 1.0),
    );
    let zero = AdjointForm::constant(0.0);
    Scenario {
        name: "VIOLATOR",
        description: "running cost quadratic in the control with candidate u_bar = 1; the maximum principle fails at v = 0",
        spec,
        control: ControlLaw::constant(vec![1.0]),
        closed: ClosedForms {
            adjoints: [
                Some(zero.clone()),
                Some(zero.clone()),
                Some(zero.clone()),
                Some(zero),
            ],
            s_kernel: None,
            nabla_s: None,
            exact_state: None,
        },
        optimal: Some(false),
        classically_singular: Some(false),
        pontryagin_singular: Some(false),
    }
}

/// Quartic terminal cost with the control in the diffusion and a nonzero
/// candidate, so the trajectory is random and every adjoint pair carries a
/// genuine correction part. S(t) = -12 x(t) with noise gradient -6.
fn random_adj() -> Scenario {
    let horizon = 1.0;
    let x0 = 1.0;
    let u_bar = 0.5;
    let spec = scalar_spec(
        horizon,
        x0,
        p_zero(),
        p_term(1.0, 0, 0, 1),
        p_zero(),
        p_term(1.0, 0, 4, 0),
        box_region(-1.0, 1.0),
    );
    let c = u_bar; // diffusion level along the candidate
    Scenario {
        name: "RANDOM-ADJ",
        description: "quartic terminal cost with the control in the diffusion and nonzero candidate; random adjoints with known correction parts",
        spec,
        control: ControlLaw::constant(vec![u_bar]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm {
                    // p1 = -4 x^3 - 12 c^2 x (T - t) / ... with Var = c^2 (T - t)
                    p: Arc::new(move |t, x| -4.0 * x * x * x - 12.0 * x * c * c * (horizon - t)),
                    q: Arc::new(move |t, x| {
                        c * (-12.0 * x * x - 12.0 * c * c * (horizon - t))
                    }),
                }),
                Some(AdjointForm {
                    p: Arc::new(move |t, x| -12.0 * (x * x + c * c * (horizon - t))),
                    q: Arc::new(move |_, x| -24.0 * c * x),
                }),
                Some(AdjointForm {
                    p: Arc::new(move |_, x| -24.0 * x),
                    q: Arc::new(move |_, _| -24.0 * c),
                }),
                Some(AdjointForm {
                    p: Arc::new(|_, _| -24.0),
                    q: Arc::new(|_, _| 0.0),
                }),
            ],
            s_kernel: Some(Arc::new(move |_, x| -24.0 * c * x)),
            nabla_s: Some(Arc::new(move |_, _| -24.0 * c * c)),
            exact_state: Some(Arc::new(move |w_t, _| x0 + c * w_t)),
        },
        optimal: Some(false),
        classically_singular: Some(false),
        pontryagin_singular: Some(false),
    }
}

/// Additive noise with a quartic terminal cost: the full scalar chain is
/// known in closed form and the value function gives an independent oracle.
fn quartic_additive() -> Scenario {
    let horizon = 1.0;
    let x0 = 0.0;
    let mut spec = scalar_spec(
        horizon,
        x0,
        p_zero(),
        Polynomial::constant(1, 1, 1.0),
        p_zero(),
        p_term(1.0, 0, 4, 0),
        box_region(-1.0, 1.0),
    );
    spec.mode = Mode::Needle;
    Scenario {
        name: "QUARTIC",
        description: "additive noise, quartic terminal cost; the full scalar adjoint chain is known in closed form",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm {
                    p: Arc::new(move |t, x| -4.0 * x * x * x - 12.0 * x * (horizon - t)),
                    q: Arc::new(move |t, x| -12.0 * x * x - 12.0 * (horizon - t)),
                }),
                Some(AdjointForm {
                    p: Arc::new(move |t, x| -12.0 * (x * x + horizon - t)),
                    q: Arc::new(move |_, x| -24.0 * x),
                }),
                Some(AdjointForm {
                    p: Arc::new(move |_, x| -24.0 * x),
                    q: Arc::new(|_, _| -24.0),
                }),
                Some(AdjointForm {
                    p: Arc::new(|_, _| -24.0),
                    q: Arc::new(|_, _| 0.0),
                }),
            ],
            s_kernel: None,
            nabla_s: None,
            exact_state: Some(Arc::new(move |w_t, _| x0 + w_t)),
        },
        optimal: None,
        classically_singular: None,
        pontryagin_singular: None,
    }
}

/// Geometric dynamics with an additive control channel in the drift:
/// b = mu x + u, sigma = nu x, h = x^2, candidate u_bar = 0. The state at
/// the candidate is exactly geometric Brownian motion, which gives the
/// strong-convergence oracle; the adjoints are known in closed form.
pub const GBM_MU: f64 = 0.05;
pub const GBM_NU: f64 = 0.2;

fn gbm() -> Scenario {
    let horizon = 1.0;
    let x0 = 1.0;
    let (mu, nu) = (GBM_MU, GBM_NU);
    let drift = poly().term(mu, 0, &[1], &[0]).term(1.0, 0, &[0], &[1]);
    let spec = scalar_spec(
        horizon,
        x0,
        drift,
        p_term(nu, 0, 1, 0),
        p_zero(),
        p_term(1.0, 0, 2, 0),
        box_region(-1.0, 1.0),
    );
    let rate = 2.0 * mu + nu * nu;
    Scenario {
        name: "GBM",
        description: "geometric state dynamics with an additive control channel; exact path oracle for convergence studies",
        spec,
        control: ControlLaw::constant(vec![0.0]),
        closed: ClosedForms {
            adjoints: [
                Some(AdjointForm {
                    p: Arc::new(move |t, x| -2.0 * x * ((rate) * (horizon - t)).exp()),
                    q: Arc::new(move |t, x| -2.0 * nu * x * ((rate) * (horizon - t)).exp()),
                }),
                Some(AdjointForm {
                    p: Arc::new(move |t, _| -2.0 * ((rate) * (horizon - t)).exp()),
                    q: Arc::new(|_, _| 0.0),
                }),
                None,
                None,
            ],
            s_kernel: Some(Arc::new(move |t, _| -2.0 * ((rate) * (horizon - t)).exp())),
            nabla_s: None,
            exact_state: Some(Arc::new(move |w_t, t| {
                x0 * ((mu - 0.5 * nu * nu) * t + nu * w_t).exp()
            })),
        },
        optimal: Some(false),
        classically_singular: Some(false),
        pontryagin_singular: Some(false),
    }
}

/// All built-in scenarios.
pub fn builtin_scenarios() -> Vec<Scenario> {
    vec![
        null_scenario(),
        sing_det(),
        sing_det_t(),
        nonsing_diff(),
        violator(),
        random_adj(),
        quartic_additive(),
        gbm(),
    ]
}

/// Find a built-in scenario by name (case-insensitive).
pub fn find(name: &str) -> Option<Scenario> {
    builtin_scenarios()
        .into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
}

// ---------------------------------------------------------------------------
// brute-force oracles
// ---------------------------------------------------------------------------

/// Cost difference J(perturbed) - J(candidate) on common random numbers.
pub fn brute_force_cost_delta(
    spec: &ProblemSpec,
    control: &ControlLaw,
    perturbation: &PerturbationSpec,
    ctx: &SimulationContext,
) -> Result<Stat> {
    let base = simulate_state(spec, control, ctx)?;
    let perturbed = simulate_state_perturbed(spec, control, perturbation, ctx)?;
    let base_cost = pathwise_cost(spec, &base, ctx);
    let pert_cost = pathwise_cost(spec, &perturbed, ctx);
    let mut acc = Accumulator::new();
    for (a, b) in pert_cost.iter().zip(&base_cost) {
        acc.push(a - b);
    }
    Ok(acc.stat())
}

/// What a convergence study measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// Pathwise terminal error against the exact state oracle.
    StrongState,
    /// Node-wise error of the order-2 backward recursion against the
    /// closed-form adjoint.
    AdjointResidual,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub kind: StudyKind,
    pub entries: Vec<(usize, f64)>, // (steps, error)
    pub fit: Option<OrderFit>,
}

/// Fit the convergence order of a scenario quantity over a grid sweep.
pub fn convergence_study(
    scenario: &Scenario,
    kind: StudyKind,
    steps_list: &[usize],
    paths: usize,
    seed: u64,
) -> Result<ConvergenceStudy> {
    let mut entries = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        let ctx = crate::sim::make_context(scenario.spec.horizon, steps, paths, seed);
        let err = match kind {
            StudyKind::StrongState => {
                let oracle = scenario.closed.exact_state.as_ref().ok_or_else(|| {
                    Error::Unavailable(format!(
                        "scenario {} has no exact state oracle",
                        scenario.name
                    ))
                })?;
                let state = simulate_state(&scenario.spec, &scenario.control, &ctx)?;
                let mut mse = 0.0;
                for path in 0..ctx.paths {
                    let mut w_t = 0.0;
                    for k in 0..ctx.steps {
                        w_t += ctx.increment(path, k);
                    }
                    let exact = oracle(w_t, scenario.spec.horizon);
                    let got = state.values.at(path, ctx.steps)[0];
                    mse += (got - exact) * (got - exact);
                }
                (mse / ctx.paths as f64).sqrt()
            }
            StudyKind::AdjointResidual => {
                let form = scenario.closed.adjoints[1].as_ref().ok_or_else(|| {
                    Error::Unavailable(format!(
                        "scenario {} has no closed-form order-2 adjoint",
                        scenario.name
                    ))
                })?;
                let state = simulate_state(&scenario.spec, &scenario.control, &ctx)?;
                let pair = crate::adjoint::solve_convex_pair(
                    &scenario.spec,
                    &state,
                    &ctx,
                    crate::adjoint::Backend::Regression(Default::default()),
                )?;
                let mut worst = 0.0_f64;
                for k in 0..=ctx.steps {
                    let t = ctx.time(k);
                    let x = state.values.at(0, k)[0];
                    let want = (form.p)(t, x);
                    let got = pair.second.p_at(0, k)[0];
                    worst = worst.max((want - got).abs());
                }
                worst
            }
        };
        entries.push((steps, err));
    }
    let h: Vec<f64> = entries
        .iter()
        .map(|&(s, _)| scenario.spec.horizon / s as f64)
        .collect();
    let e: Vec<f64> = entries.iter().map(|&(_, err)| err).collect();
    let fit = order_fit(&h, &e, 1e-14);
    Ok(ConvergenceStudy { kind, entries, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::make_context;

    #[test]
    fn all_scenarios_validate_and_self_check() {
        let all = builtin_scenarios();
        assert!(all.len() >= 6);
        for sc in &all {
            let report = sc.spec.validate().unwrap();
            assert!(report.ok, "{} fails validation", sc.name);
            sc.self_check().unwrap_or_else(|e| panic!("{}: {e}", sc.name));
        }
    }

    #[test]
    fn lookup_is_case_insensitive() {
        assert!(find("sing-det").is_some());
        assert!(find("SING-DET").is_some());
        assert!(find("nope").is_none());
    }

    #[test]
    fn cost_delta_identical_spike_is_zero_pathwise() {
        let sc = find("SING-DET").unwrap();
        let ctx = make_context(1.0, 64, 32, 3);
        let pert = PerturbationSpec::spike(0.25, 0.25, vec![0.0]);
        let stat = brute_force_cost_delta(&sc.spec, &sc.control, &pert, &ctx).unwrap();
        assert_eq!(stat.value, 0.0);
        assert_eq!(stat.stderr, 0.0);
    }

    #[test]
    fn cost_delta_deterministic_ramp() {
        // spike of width 0.1 at 0.5 with v = 1: eps^2 (T - t_bar - eps) + eps^3/3
        let sc = find("SING-DET").unwrap();
        let ctx = make_context(1.0, 1000, 4, 5); // dt divides the spike exactly
        let pert = PerturbationSpec::spike(0.5, 0.1, vec![1.0]);
        let stat = brute_force_cost_delta(&sc.spec, &sc.control, &pert, &ctx).unwrap();
        let want = 0.1f64.powi(2) * (1.0 - 0.5 - 0.1) + 0.1f64.powi(3) / 3.0;
        assert!(
            (stat.value - want).abs() < 1e-5,
            "got {}, want {want}",
            stat.value
        );
        assert!(stat.stderr < 1e-14);
    }

    #[test]
    fn cost_delta_null_is_zero() {
        let sc = find("NULL").unwrap();
        let ctx = make_context(1.0, 64, 32, 7);
        let pert = PerturbationSpec::spike(0.25, 0.25, vec![1.0]);
        let stat = brute_force_cost_delta(&sc.spec, &sc.control, &pert, &ctx).unwrap();
        assert_eq!(stat.value, 0.0);
    }

    #[test]
    fn geometric_strong_order_half() {
        let sc = find("GBM").unwrap();
        let study =
            convergence_study(&sc, StudyKind::StrongState, &[64, 128, 256, 512], 4000, 9)
                .unwrap();
        let fit = study.fit.unwrap();
        assert!(
            (fit.exponent - 0.5).abs() <= 0.1,
            "strong order {} +- {}",
            fit.exponent,
            fit.stderr
        );
    }

    #[test]
    fn adjoint_recursion_first_order_in_dt() {
        // the time-weighted singular scenario has a time-varying driver, so
        // the backward recursion error is first order against the closed form
        let sc = find("SING-DET-T").unwrap();
        let study = convergence_study(
            &sc,
            StudyKind::AdjointResidual,
            &[64, 128, 256, 512],
            128,
            11,
        )
        .unwrap();
        let fit = study.fit.unwrap();
        assert!(
            (fit.exponent - 1.0).abs() <= 0.2,
            "adjoint residual order {} +- {}",
            fit.exponent,
            fit.stderr
        );
    }

    #[test]
    fn null_scenario_errors_vanish() {
        // every adjoint of the null scenario is identically zero, so the
        // recursion reproduces the closed form exactly at any resolution
        let sc = find("NULL").unwrap();
        let study =
            convergence_study(&sc, StudyKind::AdjointResidual, &[32, 64], 128, 13).unwrap();
        for &(_, err) in &study.entries {
            assert_eq!(err, 0.0);
        }
        assert!(study.fit.is_none());
    }

    #[test]
    fn declared_singularity_statuses_match_checks() {
        use crate::conditions::{
            check_classical_singular, check_pontryagin_singular, default_probe_values,
            CheckConfig,
        };
        use crate::report::Verdict;
        for sc in builtin_scenarios() {
            let (Some(classical), Some(pontryagin)) =
                (sc.classically_singular, sc.pontryagin_singular)
            else {
                continue;
            };
            let ctx = make_context(sc.spec.horizon, 256, 4000, 15);
            let state = simulate_state(&sc.spec, &sc.control, &ctx).unwrap();
            let pair = sc.closed_pair(&state, &ctx).unwrap();
            let cfg = CheckConfig::named(sc.name);
            let report = check_classical_singular(&sc.spec, &state, &pair, &ctx, &cfg);
            assert_eq!(
                report.verdict == Verdict::Holds,
                classical,
                "{}: classical singularity mismatch",
                sc.name
            );
            let v_list = default_probe_values(&sc.spec, &cfg);
            let report =
                check_pontryagin_singular(&sc.spec, &state, &pair, &v_list, &ctx, &cfg);
            assert_eq!(
                report.verdict == Verdict::Holds,
                pontryagin,
                "{}: pontryagin singularity mismatch",
                sc.name
            );
        }
    }

    #[test]
    fn closed_form_q_matches_regression_where_random() {
        // RANDOM-ADJ: the order-2 correction part is -24 c x; check the
        // regression backend reproduces it in the middle of the grid
        let sc = find("RANDOM-ADJ").unwrap();
        let ctx = make_context(1.0, 64, 20_000, 17);
        let state = simulate_state(&sc.spec, &sc.control, &ctx).unwrap();
        let pair = crate::adjoint::solve_convex_pair(
            &sc.spec,
            &state,
            &ctx,
            crate::adjoint::Backend::Regression(Default::default()),
        )
        .unwrap();
        let k = 32;
        let mut err = 0.0;
        let mut scale = 0.0;
        for path in 0..ctx.paths {
            let x = state.values.at(path, k)[0];
            let want = -24.0 * 0.5 * x;
            let got = pair.second.q_at(path, k)[0];
            err += (want - got) * (want - got);
            scale += want * want;
        }
        // the correction-part extractor carries O(1/sqrt(M dt)) noise
        let rel = (err / scale).sqrt();
        assert!(rel <= 0.25, "relative q2 error {rel}");
    }
}
