//! Noise derivatives of grid processes.
//!
//! The state's Malliavin derivative comes from the tangent-process identity
//! `D_s x(t) = Phi(t) Phi(s)^{-1} sigma(s)`; test functionals supply their
//! derivative in closed form; deterministic processes have a zero slice.
//! On top of the slices sit the near-diagonal limit estimator (with its
//! membership diagnostic) and the Clark-Ocone reconstruction check.
//!
//! Slices are evaluated lazily: the full triangular array over (s, t, path)
//! would not fit in memory at production path counts, and every consumer
//! walks either a band near the diagonal or a single column.

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{ControlKind, ControlLaw, GradientSupplier, ProblemSpec};
use crate::regression::{regress_conditional, RegressionBasis};
use crate::sim::{Grid2, SimulationContext, StateEnsemble, TransitionEnsemble};
use crate::stats::{Accumulator, Stat};
use std::sync::Arc;

/// How a slice (or nabla process) was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceMethod {
    Tangent,
    Supplied,
    Zero,
}

impl SliceMethod {
    pub fn name(self) -> &'static str {
        match self {
            SliceMethod::Tangent => "tangent",
            SliceMethod::Supplied => "supplied",
            SliceMethod::Zero => "zero",
        }
    }
}

type SuppliedFn = Arc<dyn Fn(usize, usize, usize) -> f64 + Send + Sync>;

enum SliceSource {
    /// One state component through the tangent identity; `inv_sigma` holds
    /// Phi(s)^{-1} sigma(s) per (path, s).
    Tangent {
        phi: Arc<TransitionEnsemble>,
        inv_sigma: Grid2,
        component: usize,
    },
    /// Explicit function of (path, s_index, t_index).
    Supplied(SuppliedFn),
    Zero,
}

/// Scalar Malliavin derivative D_s phi(t) of one grid process.
pub struct MalliavinSlice {
    pub process: String,
    pub method: SliceMethod,
    source: SliceSource,
    pub paths: usize,
    pub nodes: usize,
}

impl MalliavinSlice {
    /// D_s phi(t); identically zero above the diagonal (s > t), which is the
    /// adaptedness of the underlying process.
    #[inline]
    pub fn value(&self, path: usize, s_index: usize, t_index: usize) -> f64 {
        if s_index > t_index {
            return 0.0;
        }
        match &self.source {
            SliceSource::Zero => 0.0,
            SliceSource::Supplied(f) => f(path, s_index, t_index),
            SliceSource::Tangent {
                phi,
                inv_sigma,
                component,
            } => {
                let n = phi.dim;
                let phi_t = phi.phi.at(path, t_index);
                let w = inv_sigma.at(path, s_index);
                let row = &phi_t[component * n..(component + 1) * n];
                linalg::dot(row, w)
            }
        }
    }

    pub fn zero(process: &str, paths: usize, nodes: usize) -> Self {
        MalliavinSlice {
            process: process.into(),
            method: SliceMethod::Zero,
            source: SliceSource::Zero,
            paths,
            nodes,
        }
    }

    pub fn supplied<F>(process: &str, paths: usize, nodes: usize, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f64 + Send + Sync + 'static,
    {
        MalliavinSlice {
            process: process.into(),
            method: SliceMethod::Supplied,
            source: SliceSource::Supplied(Arc::new(f)),
            paths,
            nodes,
        }
    }
}

/// Build the tangent-process slice for one component of the state.
pub fn tangent_slice(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    transition: Arc<TransitionEnsemble>,
    component: usize,
    ctx: &SimulationContext,
) -> Result<MalliavinSlice> {
    let n = spec.state_dim;
    if component >= n {
        return Err(Error::DimensionMismatch(format!(
            "state component {component} out of range for n = {n}"
        )));
    }
    let nodes = ctx.steps + 1;
    let mut inv_sigma = Grid2::zeros(state.paths(), nodes, n);
    let mut sigma = vec![0.0; n];
    for path in 0..state.paths() {
        for s in 0..nodes {
            let t = ctx.time(s.min(ctx.steps));
            let x = state.values.at(path, s);
            let u = state.controls.at(path, s);
            spec.diffusion.eval_into(t, x, u, &mut sigma);
            let w = linalg::mat_vec(transition.phi_inv.at(path, s), &sigma, n, n);
            inv_sigma.at_mut(path, s).copy_from_slice(&w);
        }
    }
    Ok(MalliavinSlice {
        process: format!("state[{component}]"),
        method: SliceMethod::Tangent,
        source: SliceSource::Tangent {
            phi: transition,
            inv_sigma,
            component,
        },
        paths: state.paths(),
        nodes,
    })
}

/// One row of the state slice: D_s x_i(t) for fixed s over all grid t.
/// Entries with t < s are zero.
pub fn tangent_state_derivative(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    transition: Arc<TransitionEnsemble>,
    component: usize,
    s_index: usize,
    ctx: &SimulationContext,
) -> Result<Grid2> {
    let slice = tangent_slice(spec, state, transition, component, ctx)?;
    let nodes = ctx.steps + 1;
    let mut out = Grid2::zeros(state.paths(), nodes, 1);
    for path in 0..state.paths() {
        for t in s_index..nodes {
            out.set_scalar(path, t, slice.value(path, s_index, t));
        }
    }
    Ok(out)
}

/// Diagnostic entry: estimated integral of the window supremum discrepancy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FepsEntry {
    pub eps: f64,
    pub integral: f64,
}

/// A near-diagonal noise-derivative process with membership diagnostics.
#[derive(Debug, Clone)]
pub struct NablaProcess {
    pub method: SliceMethod,
    pub dim: usize,
    /// values[path][node]; the terminal node copies its predecessor.
    pub values: Grid2,
    pub f_eps: Vec<FepsEntry>,
}

impl NablaProcess {
    pub fn zeros(paths: usize, nodes: usize, dim: usize) -> Self {
        NablaProcess {
            method: SliceMethod::Zero,
            dim,
            values: Grid2::zeros(paths, nodes, dim),
            f_eps: Vec::new(),
        }
    }

    #[inline]
    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let p = if self.values.paths == 1 { 0 } else { path };
        self.values.at(p, node)
    }
}

/// Default diagnostic windows, in units of dt.
pub const FEPS_WINDOWS: [usize; 3] = [4, 8, 16];

/// Estimate nabla phi(s) as the average of D_s phi(t) over t in
/// (s, s + eps_min] with eps_min = max(2 dt, T/64), and evaluate the window
/// discrepancy integral for each requested eps.
pub fn nabla_estimate(
    slice: &MalliavinSlice,
    eps_list: &[f64],
    ctx: &SimulationContext,
) -> Result<NablaProcess> {
    let dt = ctx.dt();
    for &eps in eps_list {
        if eps < 2.0 * dt {
            return Err(Error::InsufficientGridResolution {
                requested: eps,
                minimum: 2.0 * dt,
            });
        }
    }
    let eps_min = (2.0 * dt).max(ctx.horizon / 64.0);
    let w_min = ((eps_min / dt).round() as usize).max(2);
    let paths = slice.paths;
    let nodes = ctx.steps + 1;

    let mut values = Grid2::zeros(paths, nodes, 1);
    for path in 0..paths {
        for s in 0..ctx.steps {
            let hi = (s + w_min).min(ctx.steps);
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for t in (s + 1)..=hi {
                acc += slice.value(path, s, t);
                cnt += 1;
            }
            values.set_scalar(path, s, if cnt > 0 { acc / cnt as f64 } else { 0.0 });
        }
        let last = values.scalar(path, ctx.steps.saturating_sub(1));
        values.set_scalar(path, ctx.steps, last);
    }

    // f_eps(s) = sup over the window of E|D_s phi(t) - nabla phi(s)|^2,
    // integrated over s with a left sum.
    let mut windows: Vec<usize> = FEPS_WINDOWS.to_vec();
    for &eps in eps_list {
        let w = ((eps / dt).round() as usize).max(2);
        if !windows.contains(&w) {
            windows.push(w);
        }
    }
    windows.sort_unstable();
    let mut f_eps = Vec::new();
    for w in windows {
        let mut integral = 0.0;
        for s in 0..ctx.steps {
            let hi = (s + w).min(ctx.steps);
            let mut sup = 0.0_f64;
            for t in (s + 1)..=hi {
                let mut acc = 0.0;
                for path in 0..paths {
                    let d = slice.value(path, s, t) - values.scalar(path, s);
                    acc += d * d;
                }
                sup = sup.max(acc / paths as f64);
            }
            integral += sup * dt;
        }
        f_eps.push(FepsEntry {
            eps: w as f64 * dt,
            integral,
        });
    }

    Ok(NablaProcess {
        method: slice.method,
        dim: 1,
        values,
        f_eps,
    })
}

/// Near-diagonal noise derivative of the candidate control.
///
/// Feedback laws get the chain rule through the tangent identity at the
/// diagonal: nabla u(s) = k_x(s, x(s)) sigma(s, x(s), u(s)). Constant laws
/// are deterministic, hence zero. Open-loop grid laws without a supplied
/// gradient are reported unavailable rather than guessed.
pub fn nabla_ubar(
    control: &ControlLaw,
    state: &StateEnsemble,
    spec: &ProblemSpec,
    ctx: &SimulationContext,
) -> Result<NablaProcess> {
    let m = spec.control_dim;
    let n = spec.state_dim;
    let nodes = ctx.steps + 1;
    match &control.gradient {
        GradientSupplier::Zero => Ok(NablaProcess::zeros(state.paths(), nodes, m)),
        GradientSupplier::ClosedForm(map) => {
            let mut values = Grid2::zeros(state.paths(), nodes, m);
            let mut buf = vec![0.0; m];
            for path in 0..state.paths() {
                for k in 0..nodes {
                    let t = ctx.time(k.min(ctx.steps));
                    map.eval_into(t, state.values.at(path, k), &[], &mut buf);
                    values.at_mut(path, k).copy_from_slice(&buf);
                }
            }
            Ok(NablaProcess {
                method: SliceMethod::Supplied,
                dim: m,
                values,
                f_eps: Vec::new(),
            })
        }
        GradientSupplier::Unavailable => match &control.kind {
            ControlKind::OpenLoopConstant(_) => Ok(NablaProcess::zeros(state.paths(), nodes, m)),
            ControlKind::OpenLoopGrid(_) => Err(Error::Unavailable(
                "open-loop control has no noise-gradient supplier".into(),
            )),
            ControlKind::Feedback(map) => {
                let kx: Vec<_> = map
                    .components
                    .iter()
                    .flat_map(|p| (0..n).map(move |i| p.diff_x(i)))
                    .collect();
                let mut values = Grid2::zeros(state.paths(), nodes, m);
                let mut kx_v = vec![0.0; m * n];
                let mut sigma = vec![0.0; n];
                for path in 0..state.paths() {
                    for k in 0..nodes {
                        let t = ctx.time(k.min(ctx.steps));
                        let x = state.values.at(path, k);
                        let u = state.controls.at(path, k);
                        crate::poly::eval_poly_matrix(&kx, t, x, &[], &mut kx_v);
                        spec.diffusion.eval_into(t, x, u, &mut sigma);
                        let g = linalg::mat_vec(&kx_v, &sigma, m, n);
                        values.at_mut(path, k).copy_from_slice(&g);
                    }
                }
                Ok(NablaProcess {
                    method: SliceMethod::Tangent,
                    dim: m,
                    values,
                    f_eps: Vec::new(),
                })
            }
        },
    }
}

/// Closed-form gradient field (t, x) -> flattened value.
pub type GradientField = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Supplier for the noise derivative of a derived matrix process (such as
/// the mixed second-variation kernel).
pub enum ProcessGradient {
    /// Deterministic process: the derivative vanishes identically.
    DeterministicZero,
    /// Closed form (t, x) -> flattened value of the stated dimension.
    ClosedForm(GradientField),
    Unavailable,
}

/// Resolve the noise derivative of an adapted process along the state.
///
/// The contract is deliberate: a deterministic process has derivative zero,
/// a scenario may supply the closed form, and anything else is unavailable
/// so dependent checks turn inconclusive instead of guessing.
pub fn nabla_process(
    gradient: &ProcessGradient,
    dim: usize,
    state: &StateEnsemble,
    ctx: &SimulationContext,
) -> Result<NablaProcess> {
    let nodes = ctx.steps + 1;
    match gradient {
        ProcessGradient::DeterministicZero => Ok(NablaProcess::zeros(state.paths(), nodes, dim)),
        ProcessGradient::ClosedForm(f) => {
            let mut values = Grid2::zeros(state.paths(), nodes, dim);
            for path in 0..state.paths() {
                for k in 0..nodes {
                    let t = ctx.time(k.min(ctx.steps));
                    let v = f(t, state.values.at(path, k));
                    if v.len() != dim {
                        return Err(Error::DimensionMismatch(
                            "closed-form gradient has wrong dimension".into(),
                        ));
                    }
                    values.at_mut(path, k).copy_from_slice(&v);
                }
            }
            Ok(NablaProcess {
                method: SliceMethod::Supplied,
                dim,
                values,
                f_eps: Vec::new(),
            })
        }
        ProcessGradient::Unavailable => Err(Error::Unavailable(
            "no noise-gradient available for this process".into(),
        )),
    }
}

/// Noise gradient of the mixed second-variation kernel.
///
/// Three resolutions only: a supplied closed form wins; otherwise adjoints
/// solved by the analytic backend certify a deterministic kernel, whose
/// gradient vanishes; anything else is unavailable and the caller's check
/// turns inconclusive rather than guessing a value.
pub fn nabla_s(
    pair: &crate::adjoint::AdjointPair,
    spec: &ProblemSpec,
    supplied: Option<&GradientField>,
    state: &StateEnsemble,
    ctx: &SimulationContext,
) -> Result<NablaProcess> {
    let dim = spec.control_dim * spec.state_dim;
    if let Some(f) = supplied {
        return nabla_process(&ProcessGradient::ClosedForm(f.clone()), dim, state, ctx);
    }
    if pair.first.backend == "analytic" && pair.second.backend == "analytic" {
        return nabla_process(&ProcessGradient::DeterministicZero, dim, state, ctx);
    }
    nabla_process(&ProcessGradient::Unavailable, dim, state, ctx)
}

/// Clark-Ocone reconstruction discrepancy at one target node.
#[derive(Debug, Clone, Copy)]
pub struct ClarkOconeReport {
    pub t_index: usize,
    /// E |phi - reconstruction|^2 with its Monte Carlo standard error.
    pub mean_square: Stat,
    /// E [phi - reconstruction]; the sharper statistic for scaling studies.
    pub mean_residual: Stat,
}

/// Reconstruct phi = E phi + sum_k E[D_k phi | F_k] dW_k and compare.
///
/// Conditional expectations are cross-sectional regressions of the slice
/// column on the supplied conditioning state (for Wiener functionals, the
/// Brownian level itself).
pub fn clark_ocone_residual(
    phi: &[f64],
    slice: &MalliavinSlice,
    cond_state: &Grid2,
    t_index: usize,
    ctx: &SimulationContext,
    basis: &RegressionBasis,
) -> Result<ClarkOconeReport> {
    let paths = phi.len();
    if paths != slice.paths || cond_state.paths != paths {
        return Err(Error::DimensionMismatch(
            "phi, slice and conditioning state disagree on path count".into(),
        ));
    }
    let mean_phi = crate::stats::mean(phi);
    let mut recon = vec![mean_phi; paths];
    let dim = cond_state.dim;
    let mut states_k = vec![0.0; paths * dim];
    let mut column = vec![0.0; paths];
    for k in 0..t_index.min(ctx.steps) {
        let mut all_zero = true;
        for path in 0..paths {
            let v = slice.value(path, k, t_index);
            column[path] = v;
            if v != 0.0 {
                all_zero = false;
            }
            states_k[path * dim..(path + 1) * dim].copy_from_slice(cond_state.at(path, k));
        }
        if all_zero {
            continue;
        }
        let (fit, _) = regress_conditional(&column, &states_k, dim, basis)?;
        for path in 0..paths {
            recon[path] += fit[path] * ctx.increment(path, k);
        }
    }
    let mut sq = Accumulator::new();
    let mut signed = Accumulator::new();
    for path in 0..paths {
        let r = phi[path] - recon[path];
        sq.push(r * r);
        signed.push(r);
    }
    Ok(ClarkOconeReport {
        t_index,
        mean_square: sq.stat(),
        mean_residual: signed.stat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{PolyMap, Polynomial};
    use crate::problem::{ControlKind, ControlRegion, Mode, ProblemSpec};
    use crate::sim::{make_context, simulate_state, simulate_transition};

    fn spec_of(drift: Polynomial, diffusion: Polynomial, x0: f64) -> ProblemSpec {
        ProblemSpec {
            state_dim: 1,
            control_dim: 1,
            horizon: 1.0,
            initial_state: vec![x0],
            drift: PolyMap::new(vec![drift]),
            diffusion: PolyMap::new(vec![diffusion]),
            running_cost: Polynomial::zero(1, 1),
            terminal_cost: Polynomial::zero(1, 1),
            control_region: ControlRegion::Box {
                lo: vec![-1.0],
                hi: vec![1.0],
            },
            mode: Mode::Convex,
        }
    }

    fn state_and_transition(
        spec: &ProblemSpec,
        ctx: &crate::sim::SimulationContext,
    ) -> (StateEnsemble, Arc<TransitionEnsemble>) {
        let law = ControlLaw::constant(vec![0.0]);
        let state = simulate_state(spec, &law, ctx).unwrap();
        let trans = Arc::new(simulate_transition(spec, &state, ctx).unwrap());
        (state, trans)
    }

    #[test]
    fn additive_noise_derivative_is_one() {
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 1.0), 0.0);
        let ctx = make_context(1.0, 32, 8, 3);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let slice = tangent_slice(&spec, &state, trans, 0, &ctx).unwrap();
        for path in 0..8 {
            for s in 0..=32 {
                for t in s..=32 {
                    assert!((slice.value(path, s, t) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upper_triangle_is_zero() {
        let spec = spec_of(
            Polynomial::zero(1, 1).term(0.2, 0, &[1], &[0]),
            Polynomial::zero(1, 1).term(0.3, 0, &[1], &[0]).term(0.5, 0, &[0], &[0]),
            1.0,
        );
        let ctx = make_context(1.0, 16, 4, 5);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let slice = tangent_slice(&spec, &state, trans, 0, &ctx).unwrap();
        for path in 0..4 {
            for s in 0..=16 {
                for t in 0..s {
                    assert_eq!(slice.value(path, s, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn multiplicative_noise_ratio_identity() {
        // sigma = x, b = 0, x0 = 1: D_s x(t) = x(t) pathwise
        let spec = spec_of(
            Polynomial::zero(1, 1),
            Polynomial::zero(1, 1).term(1.0, 0, &[1], &[0]),
            1.0,
        );
        let ctx = make_context(1.0, 512, 64, 7);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let slice = tangent_slice(&spec, &state, trans, 0, &ctx).unwrap();
        let mut worst: f64 = 0.0;
        for path in 0..64 {
            for &s in &[0usize, 128, 256] {
                for &t in &[256usize, 384, 512] {
                    if t < s {
                        continue;
                    }
                    let x_t = state.values.at(path, t)[0];
                    if x_t.abs() < 0.05 {
                        continue;
                    }
                    let ratio = slice.value(path, s, t) / x_t;
                    worst = worst.max((ratio - 1.0).abs());
                }
            }
        }
        assert!(worst <= 0.05, "worst ratio deviation {worst}");
    }

    #[test]
    fn tangent_row_matches_slice() {
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 1.0), 0.0);
        let ctx = make_context(1.0, 16, 2, 9);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let row = tangent_state_derivative(&spec, &state, trans, 0, 4, &ctx).unwrap();
        for path in 0..2 {
            for t in 0..4 {
                assert_eq!(row.scalar(path, t), 0.0);
            }
            for t in 4..=16 {
                assert!((row.scalar(path, t) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nabla_of_brownian_level_is_one_with_zero_diagnostic() {
        // phi(t) = W(t): D_s phi(t) = 1, so the estimator is exactly one and
        // every window diagnostic vanishes
        let ctx = make_context(1.0, 128, 16, 11);
        let slice = MalliavinSlice::supplied("W", 16, 129, |_, _, _| 1.0);
        let nabla = nabla_estimate(&slice, &[8.0 * ctx.dt()], &ctx).unwrap();
        for path in 0..16 {
            for s in 0..128 {
                assert!((nabla.values.scalar(path, s) - 1.0).abs() < 1e-12);
            }
        }
        for entry in &nabla.f_eps {
            assert!(entry.integral < 1e-20);
        }
    }

    #[test]
    fn nabla_of_additive_state_is_sigma() {
        // sigma = 0.7 constant: tangent derivative equals sigma at all (s, t)
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 0.7), 0.0);
        let ctx = make_context(1.0, 128, 8, 13);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let slice = tangent_slice(&spec, &state, trans, 0, &ctx).unwrap();
        let nabla = nabla_estimate(&slice, &[], &ctx).unwrap();
        for path in 0..8 {
            for s in 0..128 {
                assert!((nabla.values.scalar(path, s) - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nabla_of_deterministic_process_is_zero() {
        let ctx = make_context(1.0, 64, 4, 15);
        let slice = MalliavinSlice::zero("deterministic", 4, 65);
        let nabla = nabla_estimate(&slice, &[], &ctx).unwrap();
        for path in 0..4 {
            for s in 0..=64 {
                assert_eq!(nabla.values.scalar(path, s), 0.0);
            }
        }
        for entry in &nabla.f_eps {
            assert_eq!(entry.integral, 0.0);
        }
    }

    #[test]
    fn nabla_rejects_subgrid_windows() {
        let ctx = make_context(1.0, 64, 4, 17);
        let slice = MalliavinSlice::zero("x", 4, 65);
        let err = nabla_estimate(&slice, &[0.5 * ctx.dt()], &ctx).unwrap_err();
        assert!(matches!(err, Error::InsufficientGridResolution { .. }));
    }

    #[test]
    fn feps_decreases_toward_small_windows() {
        // geometric state: D_s x(t) drifts away from the diagonal value as
        // t - s grows, so wider windows carry larger discrepancy integrals
        let spec = spec_of(
            Polynomial::zero(1, 1).term(0.1, 0, &[1], &[0]),
            Polynomial::zero(1, 1).term(0.4, 0, &[1], &[0]),
            1.0,
        );
        let ctx = make_context(1.0, 256, 512, 19);
        let (state, trans) = state_and_transition(&spec, &ctx);
        let slice = tangent_slice(&spec, &state, trans, 0, &ctx).unwrap();
        let nabla = nabla_estimate(&slice, &[], &ctx).unwrap();
        let integrals: Vec<f64> = nabla.f_eps.iter().map(|e| e.integral).collect();
        assert_eq!(integrals.len(), 3);
        assert!(integrals[0] < integrals[1] && integrals[1] < integrals[2]);
    }

    #[test]
    fn feps_monotone_for_builtin_scenario_states() {
        // the window diagnostic must not grow as the window shrinks, for the
        // tangent slice of every built-in scalar scenario
        for sc in crate::scenarios::builtin_scenarios() {
            let ctx = make_context(sc.spec.horizon, 128, 64, 33);
            let state = simulate_state(&sc.spec, &sc.control, &ctx).unwrap();
            let trans = Arc::new(simulate_transition(&sc.spec, &state, &ctx).unwrap());
            let slice = tangent_slice(&sc.spec, &state, trans, 0, &ctx).unwrap();
            let nabla = nabla_estimate(&slice, &[], &ctx).unwrap();
            let integrals: Vec<f64> = nabla.f_eps.iter().map(|e| e.integral).collect();
            for pair in integrals.windows(2) {
                assert!(
                    pair[0] <= pair[1] + 1e-15,
                    "{}: f_eps not monotone: {integrals:?}",
                    sc.name
                );
            }
        }
    }

    #[test]
    fn control_gradient_constant_law_is_zero() {
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 1.0), 0.0);
        let ctx = make_context(1.0, 16, 4, 21);
        let law = ControlLaw::constant(vec![0.4]);
        let state = simulate_state(&spec, &law, &ctx).unwrap();
        let nabla = nabla_ubar(&law, &state, &spec, &ctx).unwrap();
        for path in 0..4 {
            for k in 0..=16 {
                assert_eq!(nabla.at(path, k)[0], 0.0);
            }
        }
    }

    #[test]
    fn control_gradient_linear_feedback_additive_noise() {
        // k(t, x) = x with sigma = 0.6: chain rule gives nabla u = 0.6
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 0.6), 0.0);
        let law = ControlLaw::feedback(PolyMap::new(vec![
            Polynomial::zero(1, 0).term(1.0, 0, &[1], &[])
        ]));
        let ctx = make_context(1.0, 32, 8, 23);
        let state = simulate_state(&spec, &law, &ctx).unwrap();
        let nabla = nabla_ubar(&law, &state, &spec, &ctx).unwrap();
        for path in 0..8 {
            for k in 0..=32 {
                assert!((nabla.at(path, k)[0] - 0.6).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn control_gradient_open_loop_grid_unavailable() {
        let spec = spec_of(Polynomial::zero(1, 1), Polynomial::constant(1, 1, 1.0), 0.0);
        let law = ControlLaw {
            kind: ControlKind::OpenLoopGrid(vec![vec![0.1]; 17]),
            gradient: crate::problem::GradientSupplier::Unavailable,
        };
        let ctx = make_context(1.0, 16, 4, 25);
        let state = simulate_state(&spec, &law, &ctx).unwrap();
        let err = nabla_ubar(&law, &state, &spec, &ctx).unwrap_err();
        assert!(matches!(err, Error::Unavailable(_)));
    }

    #[test]
    fn kernel_gradient_contract() {
        use crate::adjoint::{solve_convex_pair, Backend};
        // deterministic candidate, analytic backend: gradient is zero
        let sc = crate::scenarios::find("SING-DET").unwrap();
        let ctx = make_context(1.0, 32, 200, 35);
        let state = simulate_state(&sc.spec, &sc.control, &ctx).unwrap();
        let pair = solve_convex_pair(&sc.spec, &state, &ctx, Backend::Analytic).unwrap();
        let g = nabla_s(&pair, &sc.spec, None, &state, &ctx).unwrap();
        assert_eq!(g.at(0, 16)[0], 0.0);

        // random candidate, regression backend, no supplier: unavailable
        let ra = crate::scenarios::find("RANDOM-ADJ").unwrap();
        let state = simulate_state(&ra.spec, &ra.control, &ctx).unwrap();
        let pair =
            solve_convex_pair(&ra.spec, &state, &ctx, Backend::Regression(Default::default()))
                .unwrap();
        let err = nabla_s(&pair, &ra.spec, None, &state, &ctx).unwrap_err();
        assert!(matches!(err, Error::Unavailable(_)));

        // scenario-supplied closed form wins
        let form = ra.closed.nabla_s.clone().unwrap();
        let field: GradientField = Arc::new(move |t, x: &[f64]| vec![form(t, x[0])]);
        let g = nabla_s(&pair, &ra.spec, Some(&field), &state, &ctx).unwrap();
        assert!((g.at(3, 16)[0] + 6.0).abs() < 1e-12);
    }

    #[test]
    fn clark_ocone_brownian_terminal() {
        // phi = W(T): D = 1 and the reconstruction is exact up to the mean
        let paths = 4000;
        let ctx = make_context(1.0, 128, paths, 27);
        let mut w_grid = Grid2::zeros(paths, 129, 1);
        let mut phi = vec![0.0; paths];
        for (path, p) in phi.iter_mut().enumerate() {
            let mut w = 0.0;
            for k in 0..128 {
                w += ctx.increment(path, k);
                w_grid.set_scalar(path, k + 1, w);
            }
            *p = w;
        }
        let slice = MalliavinSlice::supplied("W(T)", paths, 129, |_, _, _| 1.0);
        let report = clark_ocone_residual(
            &phi,
            &slice,
            &w_grid,
            128,
            &ctx,
            &RegressionBasis::default(),
        )
        .unwrap();
        let bound = 3.0 / (paths as f64).sqrt();
        assert!(report.mean_square.value.sqrt() <= bound);
    }

    #[test]
    fn clark_ocone_brownian_square() {
        // phi = W(T)^2: D_s phi = 2 W(T), conditional expectation 2 W(s)
        let paths = 20_000;
        let steps = 256;
        let ctx = make_context(1.0, steps, paths, 29);
        let mut w_grid = Grid2::zeros(paths, steps + 1, 1);
        let mut w_terminal = vec![0.0; paths];
        for (path, wt) in w_terminal.iter_mut().enumerate() {
            let mut w = 0.0;
            for k in 0..steps {
                w += ctx.increment(path, k);
                w_grid.set_scalar(path, k + 1, w);
            }
            *wt = w;
        }
        let phi: Vec<f64> = w_terminal.iter().map(|w| w * w).collect();
        let wt = Arc::new(w_terminal);
        let wt_for_slice = wt.clone();
        let slice = MalliavinSlice::supplied("W(T)^2", paths, steps + 1, move |path, _, _| {
            2.0 * wt_for_slice[path]
        });
        let report = clark_ocone_residual(
            &phi,
            &slice,
            &w_grid,
            steps,
            &ctx,
            &RegressionBasis::default(),
        )
        .unwrap();
        let scale = 2.0; // Var(W_T^2) at T = 1
        let bound = 5.0 * (paths as f64).powf(-0.5) * scale + 3.0 * ctx.dt();
        assert!(
            report.mean_square.value <= bound,
            "mean square {} vs bound {bound}",
            report.mean_square.value
        );
    }

    #[test]
    fn clark_ocone_deterministic_process() {
        let paths = 500;
        let ctx = make_context(1.0, 32, paths, 31);
        let w_grid = Grid2::zeros(paths, 33, 1);
        let phi = vec![2.5; paths];
        let slice = MalliavinSlice::zero("const", paths, 33);
        let report = clark_ocone_residual(
            &phi,
            &slice,
            &w_grid,
            32,
            &ctx,
            &RegressionBasis::default(),
        )
        .unwrap();
        assert_eq!(report.mean_square.value, 0.0);
    }
}
