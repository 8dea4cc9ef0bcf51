//! Seeded simulation of the forward state, the linearized transition matrix,
//! and the convex and spike variational systems, all on one uniform grid and
//! one shared increment source.
//!
//! Every equation driven by the same [`SimulationContext`] sees exactly the
//! same Brownian increments, which is what makes cost differences and
//! cross-checks between the direct and explicit variational solutions
//! meaningful at finite path counts.

use crate::error::{Error, Result};
use crate::linalg;
use crate::poly::{eval_poly_matrix, Polynomial};
use crate::problem::{ControlLaw, Mode, PerturbationSpec, ProblemSpec};
use crate::rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Guard: a path whose state norm exceeds this is reported as a blow-up.
pub const BLOWUP_GUARD: f64 = 1e8;

/// Determinant floor below which the transition matrix counts as singular.
pub const DET_FLOOR: f64 = 1e-10;

/// Uniform time grid plus a reproducible Brownian increment source.
#[derive(Debug, Clone)]
pub struct SimulationContext {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    /// Global index of local path 0; windows shift this.
    pub path_offset: u64,
    /// Optional explicit increment table `[path][step]` for tests.
    table: Option<Arc<Vec<Vec<f64>>>>,
}

impl SimulationContext {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.horizon * step as f64 / self.steps as f64
    }

    /// Brownian increment for (path, step); independent of evaluation order.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        if let Some(table) = &self.table {
            return table[path][step];
        }
        let global = self.path_offset + path as u64;
        rng::standard_normal(self.seed, global, step as u64) * self.dt().sqrt()
    }

    /// All increments of one path into a caller buffer of length `steps`.
    pub fn fill_path(&self, path: usize, buf: &mut [f64]) {
        debug_assert_eq!(buf.len(), self.steps);
        for (k, b) in buf.iter_mut().enumerate() {
            *b = self.increment(path, k);
        }
    }

    /// A window of `count` paths starting at local index `offset`, sharing
    /// the master seed so global path identities (and draws) are unchanged.
    pub fn window(&self, offset: usize, count: usize) -> SimulationContext {
        assert!(offset + count <= self.paths || self.table.is_none());
        SimulationContext {
            horizon: self.horizon,
            steps: self.steps,
            paths: count,
            seed: self.seed,
            path_offset: self.path_offset + offset as u64,
            table: self.table.clone(),
        }
    }

    /// Explicit-increment context for deterministic tests.
    pub fn from_table(horizon: f64, increments: Vec<Vec<f64>>) -> SimulationContext {
        let paths = increments.len();
        let steps = increments.first().map(|p| p.len()).unwrap_or(0);
        SimulationContext {
            horizon,
            steps,
            paths,
            seed: 0,
            path_offset: 0,
            table: Some(Arc::new(increments)),
        }
    }

    /// Snap a time to its grid node index (nearest node).
    pub fn node_of(&self, t: f64) -> usize {
        let k = (t / self.dt()).round();
        (k.max(0.0) as usize).min(self.steps)
    }

    /// Step membership mask for a union of left-closed intervals, snapped to
    /// grid nodes: step k belongs when its left endpoint does.
    pub fn step_mask(&self, intervals: &[(f64, f64)]) -> Vec<bool> {
        let mut mask = vec![false; self.steps];
        for &(a, b) in intervals {
            let ka = self.node_of(a);
            let kb = self.node_of(b);
            for item in mask.iter_mut().take(kb.min(self.steps)).skip(ka) {
                *item = true;
            }
        }
        mask
    }
}

/// Build the shared simulation context.
pub fn make_context(horizon: f64, steps: usize, paths: usize, seed: u64) -> SimulationContext {
    assert!(steps >= 2, "need at least two steps");
    assert!(paths >= 1, "need at least one path");
    assert!(horizon > 0.0, "horizon must be positive");
    SimulationContext {
        horizon,
        steps,
        paths,
        seed,
        path_offset: 0,
        table: None,
    }
}

/// Flat (path, node, component) storage; node-major within each path.
#[derive(Debug, Clone)]
pub struct Grid2 {
    pub paths: usize,
    pub nodes: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(paths: usize, nodes: usize, dim: usize) -> Self {
        Grid2 {
            paths,
            nodes,
            dim,
            data: vec![0.0; paths * nodes * dim],
        }
    }

    #[inline]
    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let base = (path * self.nodes + node) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, node: usize) -> &mut [f64] {
        let base = (path * self.nodes + node) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    /// Scalar accessor for dim-1 grids.
    #[inline]
    pub fn scalar(&self, path: usize, node: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.data[path * self.nodes + node]
    }

    #[inline]
    pub fn set_scalar(&mut self, path: usize, node: usize, v: f64) {
        debug_assert_eq!(self.dim, 1);
        self.data[path * self.nodes + node] = v;
    }

    /// Parallel fill: `f(path, row_buffer)` writes the whole path row
    /// (nodes * dim values). Deterministic regardless of thread count.
    pub fn par_fill<F>(&mut self, f: F) -> Result<()>
    where
        F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
    {
        let nodes = self.nodes;
        let dim = self.dim;
        self.data
            .par_chunks_mut(nodes * dim)
            .enumerate()
            .try_for_each(|(path, row)| f(path, row))
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Forward state ensemble with the control values that produced it.
#[derive(Debug, Clone)]
pub struct StateEnsemble {
    pub spec_state_dim: usize,
    pub spec_control_dim: usize,
    /// x[path][node] in R^n, nodes = steps + 1.
    pub values: Grid2,
    /// Control at every node (the terminal node repeats the last step value
    /// for open-loop laws evaluated beyond the grid).
    pub controls: Grid2,
}

impl StateEnsemble {
    pub fn paths(&self) -> usize {
        self.values.paths
    }

    pub fn nodes(&self) -> usize {
        self.values.nodes
    }
}

/// Fundamental solution of the linearized state equation and its inverse.
#[derive(Debug, Clone)]
pub struct TransitionEnsemble {
    pub dim: usize,
    pub phi: Grid2,
    pub phi_inv: Grid2,
}

/// Variational solutions: two components in convex mode, four in needle mode.
#[derive(Debug, Clone)]
pub struct VariationalBundle {
    pub mode: Mode,
    /// y[order][path][node]; order counts from one.
    pub components: Vec<Grid2>,
    pub perturbation: PerturbationSpec,
}

impl VariationalBundle {
    pub fn order(&self, k: usize) -> &Grid2 {
        &self.components[k - 1]
    }
}

/// Scratch for coefficient evaluation along one path.
struct CoeffScratch {
    b: Vec<f64>,
    sigma: Vec<f64>,
    u: Vec<f64>,
}

/// Euler-Maruyama forward simulation under a node-wise control policy.
fn simulate_with<F>(spec: &ProblemSpec, ctx: &SimulationContext, policy: F) -> Result<StateEnsemble>
where
    F: Fn(f64, usize, &[f64], &mut [f64]) + Sync,
{
    let n = spec.state_dim;
    let m = spec.control_dim;
    let nodes = ctx.steps + 1;

    let mut values = Grid2::zeros(ctx.paths, nodes, n);
    let mut controls = Grid2::zeros(ctx.paths, nodes, m);

    let v_data: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..ctx.paths)
        .into_par_iter()
        .map(|path| {
            let mut xs = vec![0.0; nodes * n];
            let mut us = vec![0.0; nodes * m];
            let mut scratch = CoeffScratch {
                b: vec![0.0; n],
                sigma: vec![0.0; n],
                u: vec![0.0; m],
            };
            xs[..n].copy_from_slice(&spec.initial_state);
            let dt = ctx.dt();
            for k in 0..ctx.steps {
                let t = ctx.time(k);
                let (head, tail) = xs.split_at_mut((k + 1) * n);
                let x_k = &head[k * n..];
                policy(t, k, x_k, &mut scratch.u);
                us[k * m..(k + 1) * m].copy_from_slice(&scratch.u);
                spec.drift.eval_into(t, x_k, &scratch.u, &mut scratch.b);
                spec.diffusion.eval_into(t, x_k, &scratch.u, &mut scratch.sigma);
                let dw = ctx.increment(path, k);
                let x_next = &mut tail[..n];
                let mut norm_sq = 0.0;
                for i in 0..n {
                    let v = x_k[i] + scratch.b[i] * dt + scratch.sigma[i] * dw;
                    x_next[i] = v;
                    norm_sq += v * v;
                }
                if !norm_sq.is_finite() || norm_sq.sqrt() > BLOWUP_GUARD {
                    return Err(Error::NonFinite {
                        path,
                        step: k + 1,
                        guard: BLOWUP_GUARD,
                    });
                }
            }
            // terminal-node control value (used by trapezoid cost quadrature)
            let t_end = ctx.time(ctx.steps);
            let x_end = xs[ctx.steps * n..].to_vec();
            policy(t_end, ctx.steps, &x_end, &mut scratch.u);
            us[ctx.steps * m..].copy_from_slice(&scratch.u);
            Ok((path, xs, us))
        })
        .collect::<Result<Vec<_>>>()?;

    for (path, xs, us) in v_data {
        for k in 0..nodes {
            values.at_mut(path, k).copy_from_slice(&xs[k * n..(k + 1) * n]);
            controls.at_mut(path, k).copy_from_slice(&us[k * m..(k + 1) * m]);
        }
    }

    Ok(StateEnsemble {
        spec_state_dim: n,
        spec_control_dim: m,
        values,
        controls,
    })
}

/// Euler-Maruyama forward simulation of the controlled state.
pub fn simulate_state(
    spec: &ProblemSpec,
    control: &ControlLaw,
    ctx: &SimulationContext,
) -> Result<StateEnsemble> {
    control.check_admissible(&spec.control_region)?;
    let steps = ctx.steps;
    simulate_with(spec, ctx, |t, k, x, out| {
        control.value_into(t, k.min(steps.saturating_sub(1)), x, &spec.control_region, out);
    })
}

/// Forward simulation under the perturbed control: convex perturbations mix
/// u_bar + eps (u - u_bar); spikes substitute the fixed value on the snapped
/// time set.
pub fn simulate_state_perturbed(
    spec: &ProblemSpec,
    base: &ControlLaw,
    perturbation: &PerturbationSpec,
    ctx: &SimulationContext,
) -> Result<StateEnsemble> {
    base.check_admissible(&spec.control_region)?;
    perturbation.validate(spec)?;
    let steps = ctx.steps;
    match perturbation {
        PerturbationSpec::Convex { comparison, epsilon } => {
            let m = spec.control_dim;
            simulate_with(spec, ctx, |t, k, x, out| {
                let k = k.min(steps.saturating_sub(1));
                base.value_into(t, k, x, &spec.control_region, out);
                let mut other = vec![0.0; m];
                comparison.value_into(t, k, x, &spec.control_region, &mut other);
                for (o, c) in out.iter_mut().zip(&other) {
                    *o += epsilon * (c - *o);
                }
            })
        }
        PerturbationSpec::Needle { intervals, value } => {
            let mask = ctx.step_mask(intervals);
            simulate_with(spec, ctx, |t, k, x, out| {
                if k < mask.len() && mask[k] {
                    out.copy_from_slice(value);
                } else {
                    base.value_into(t, k.min(steps.saturating_sub(1)), x, &spec.control_region, out);
                }
            })
        }
    }
}

/// Simulate the transition matrix d Phi = b_x Phi dt + sigma_x Phi dW and its
/// inverse, on the same increments as the provided state.
pub fn simulate_transition(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    ctx: &SimulationContext,
) -> Result<TransitionEnsemble> {
    let n = spec.state_dim;
    let nodes = ctx.steps + 1;
    let bx_polys = spec.drift.jacobian_x();
    let sx_polys = spec.diffusion.jacobian_x();

    let mut phi = Grid2::zeros(ctx.paths, nodes, n * n);
    let mut phi_inv = Grid2::zeros(ctx.paths, nodes, n * n);

    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..ctx.paths)
        .into_par_iter()
        .map(|path| {
            let mut fwd = vec![0.0; nodes * n * n];
            let mut inv = vec![0.0; nodes * n * n];
            let eye = linalg::identity(n);
            fwd[..n * n].copy_from_slice(&eye);
            inv[..n * n].copy_from_slice(&eye);
            let mut bx = vec![0.0; n * n];
            let mut sx = vec![0.0; n * n];
            let dt = ctx.dt();
            for k in 0..ctx.steps {
                let t = ctx.time(k);
                let x = state.values.at(path, k);
                let u = state.controls.at(path, k);
                eval_poly_matrix(&bx_polys, t, x, u, &mut bx);
                eval_poly_matrix(&sx_polys, t, x, u, &mut sx);
                let dw = ctx.increment(path, k);
                let cur = fwd[k * n * n..(k + 1) * n * n].to_vec();
                let step_b = linalg::mat_mul(&bx, &cur, n, n, n);
                let step_s = linalg::mat_mul(&sx, &cur, n, n, n);
                let next = &mut fwd[(k + 1) * n * n..(k + 2) * n * n];
                for i in 0..n * n {
                    next[i] = cur[i] + step_b[i] * dt + step_s[i] * dw;
                }
                let (inverse, det) = linalg::invert(next, n).ok_or(Error::SingularTransition {
                    path,
                    step: k + 1,
                    det: 0.0,
                })?;
                if det.abs() <= DET_FLOOR {
                    return Err(Error::SingularTransition {
                        path,
                        step: k + 1,
                        det,
                    });
                }
                inv[(k + 1) * n * n..(k + 2) * n * n].copy_from_slice(&inverse);
            }
            Ok((path, fwd, inv))
        })
        .collect::<Result<Vec<_>>>()?;

    for (path, fwd, inv) in rows {
        for k in 0..nodes {
            phi.at_mut(path, k).copy_from_slice(&fwd[k * n * n..(k + 1) * n * n]);
            phi_inv
                .at_mut(path, k)
                .copy_from_slice(&inv[k * n * n..(k + 1) * n * n]);
        }
    }

    Ok(TransitionEnsemble {
        dim: n,
        phi,
        phi_inv,
    })
}

/// Direction value v(t) of a perturbation at a node of a given path.
///
/// Convex perturbations use v = u_comparison - u_bar along the candidate
/// state; spike perturbations use (v - u_bar) on the snapped time set.
pub struct DirectionField<'a> {
    spec: &'a ProblemSpec,
    state: &'a StateEnsemble,
    perturbation: &'a PerturbationSpec,
    mask: Option<Vec<bool>>,
}

impl<'a> DirectionField<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        state: &'a StateEnsemble,
        perturbation: &'a PerturbationSpec,
        ctx: &SimulationContext,
    ) -> Result<Self> {
        perturbation.validate(spec)?;
        let mask = match perturbation {
            PerturbationSpec::Needle { intervals, .. } => Some(ctx.step_mask(intervals)),
            PerturbationSpec::Convex { .. } => None,
        };
        Ok(DirectionField {
            spec,
            state,
            perturbation,
            mask,
        })
    }

    /// Write v(t_k) for the path into `out` (length m).
    pub fn value_into(&self, t: f64, path: usize, step: usize, out: &mut [f64]) {
        let u_bar = self.state.controls.at(path, step);
        match self.perturbation {
            PerturbationSpec::Convex { comparison, .. } => {
                comparison.value_into(
                    t,
                    step,
                    self.state.values.at(path, step),
                    &self.spec.control_region,
                    out,
                );
                for (o, &ub) in out.iter_mut().zip(u_bar) {
                    *o -= ub;
                }
            }
            PerturbationSpec::Needle { value, .. } => {
                let active = self
                    .mask
                    .as_ref()
                    .map(|m| step < m.len() && m[step])
                    .unwrap_or(false);
                if active {
                    for (o, (&v, &ub)) in out.iter_mut().zip(value.iter().zip(u_bar)) {
                        *o = v - ub;
                    }
                } else {
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        }
    }
}

/// First- and second-order convex variational equations on shared increments.
pub fn simulate_variational_convex(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    perturbation: &PerturbationSpec,
    ctx: &SimulationContext,
) -> Result<VariationalBundle> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let nodes = ctx.steps + 1;
    let dir = DirectionField::new(spec, state, perturbation, ctx)?;

    let bx = spec.drift.jacobian_x();
    let bu = spec.drift.jacobian_u();
    let sx = spec.diffusion.jacobian_x();
    let su = spec.diffusion.jacobian_u();
    // second derivatives per drift/diffusion component, row-major over (x,u)
    let hess = |map: &crate::poly::PolyMap| -> Vec<Vec<Polynomial>> {
        map.components
            .iter()
            .map(|p| {
                let mut h = Vec::with_capacity((n + m) * (n + m));
                for a in 0..(n + m) {
                    let da = if a < n { p.diff_x(a) } else { p.diff_u(a - n) };
                    for b in 0..(n + m) {
                        h.push(if b < n { da.diff_x(b) } else { da.diff_u(b - n) });
                    }
                }
                h
            })
            .collect()
    };
    let b_hess = hess(&spec.drift);
    let s_hess = hess(&spec.diffusion);

    let mut y1 = Grid2::zeros(ctx.paths, nodes, n);
    let mut y2 = Grid2::zeros(ctx.paths, nodes, n);

    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..ctx.paths)
        .into_par_iter()
        .map(|path| {
            let dt = ctx.dt();
            let mut y1p = vec![0.0; nodes * n];
            let mut y2p = vec![0.0; nodes * n];
            let mut v = vec![0.0; m];
            let mut bx_v = vec![0.0; n * n];
            let mut bu_v = vec![0.0; n * m];
            let mut sx_v = vec![0.0; n * n];
            let mut su_v = vec![0.0; n * m];
            let mut hxuv = vec![0.0; (n + m) * (n + m)];
            for k in 0..ctx.steps {
                let t = ctx.time(k);
                let x = state.values.at(path, k);
                let u = state.controls.at(path, k);
                dir.value_into(t, path, k, &mut v);
                eval_poly_matrix(&bx, t, x, u, &mut bx_v);
                eval_poly_matrix(&bu, t, x, u, &mut bu_v);
                eval_poly_matrix(&sx, t, x, u, &mut sx_v);
                eval_poly_matrix(&su, t, x, u, &mut su_v);
                let dw = ctx.increment(path, k);

                let y1_k = y1p[k * n..(k + 1) * n].to_vec();
                let y2_k = y2p[k * n..(k + 1) * n].to_vec();

                // first order: dy1 = (bx y1 + bu v) dt + (sx y1 + su v) dW
                let b_lin = linalg::mat_vec(&bx_v, &y1_k, n, n);
                let b_ctl = linalg::mat_vec(&bu_v, &v, n, m);
                let s_lin = linalg::mat_vec(&sx_v, &y1_k, n, n);
                let s_ctl = linalg::mat_vec(&su_v, &v, n, m);
                for i in 0..n {
                    y1p[(k + 1) * n + i] =
                        y1_k[i] + (b_lin[i] + b_ctl[i]) * dt + (s_lin[i] + s_ctl[i]) * dw;
                }

                // second order quadratic sources per component:
                // (y1, v)^T Hess (y1, v) with Hess over stacked (x, u)
                let mut z = Vec::with_capacity(n + m);
                z.extend_from_slice(&y1_k);
                z.extend_from_slice(&v);
                let quad = |h: &Vec<Polynomial>, hv: &mut Vec<f64>| -> f64 {
                    eval_poly_matrix(h, t, x, u, hv);
                    let mut acc = 0.0;
                    for a in 0..(n + m) {
                        for b in 0..(n + m) {
                            acc += z[a] * hv[a * (n + m) + b] * z[b];
                        }
                    }
                    acc
                };
                let b_lin2 = linalg::mat_vec(&bx_v, &y2_k, n, n);
                let s_lin2 = linalg::mat_vec(&sx_v, &y2_k, n, n);
                for i in 0..n {
                    let qb = quad(&b_hess[i], &mut hxuv);
                    let qs = quad(&s_hess[i], &mut hxuv);
                    y2p[(k + 1) * n + i] =
                        y2_k[i] + (b_lin2[i] + qb) * dt + (s_lin2[i] + qs) * dw;
                }
            }
            let finite = y1p.iter().chain(y2p.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    path,
                    step: ctx.steps,
                    guard: BLOWUP_GUARD,
                });
            }
            Ok((path, y1p, y2p))
        })
        .collect::<Result<Vec<_>>>()?;

    for (path, y1p, y2p) in rows {
        for k in 0..nodes {
            y1.at_mut(path, k).copy_from_slice(&y1p[k * n..(k + 1) * n]);
            y2.at_mut(path, k).copy_from_slice(&y2p[k * n..(k + 1) * n]);
        }
    }

    Ok(VariationalBundle {
        mode: Mode::Convex,
        components: vec![y1, y2],
        perturbation: perturbation.clone(),
    })
}

/// First variational solution through the transition-matrix representation,
/// for a spike direction (v - u_bar) restricted to the perturbation set.
///
/// Discretizes y1(t) = Phi(t) [ int Phi^-1 (b_u - sigma_x sigma_u)(v - u_bar) chi ds
///                            + int Phi^-1 sigma_u (v - u_bar) chi dW ].
pub fn y1_explicit(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    transition: &TransitionEnsemble,
    perturbation: &PerturbationSpec,
    ctx: &SimulationContext,
) -> Result<Grid2> {
    let n = spec.state_dim;
    let m = spec.control_dim;
    let nodes = ctx.steps + 1;
    let dir = DirectionField::new(spec, state, perturbation, ctx)?;
    let bu = spec.drift.jacobian_u();
    let su = spec.diffusion.jacobian_u();
    let sx = spec.diffusion.jacobian_x();

    let mut out = Grid2::zeros(ctx.paths, nodes, n);
    out.par_fill(|path, row| {
        let dt = ctx.dt();
        let mut acc = vec![0.0; n]; // running Phi^-1-weighted integral
        let mut v = vec![0.0; m];
        let mut bu_v = vec![0.0; n * m];
        let mut su_v = vec![0.0; n * m];
        let mut sx_v = vec![0.0; n * n];
        for k in 0..ctx.steps {
            let t = ctx.time(k);
            let x = state.values.at(path, k);
            let u = state.controls.at(path, k);
            dir.value_into(t, path, k, &mut v);
            if v.iter().any(|&c| c != 0.0) {
                eval_poly_matrix(&bu, t, x, u, &mut bu_v);
                eval_poly_matrix(&su, t, x, u, &mut su_v);
                eval_poly_matrix(&sx, t, x, u, &mut sx_v);
                let dw = ctx.increment(path, k);
                let bu_dir = linalg::mat_vec(&bu_v, &v, n, m);
                let su_dir = linalg::mat_vec(&su_v, &v, n, m);
                let sx_su_dir = linalg::mat_vec(&sx_v, &su_dir, n, n);
                let phi_inv = transition.phi_inv.at(path, k);
                let mut local = vec![0.0; n];
                for i in 0..n {
                    local[i] = (bu_dir[i] - sx_su_dir[i]) * dt + su_dir[i] * dw;
                }
                let w = linalg::mat_vec(phi_inv, &local, n, n);
                for i in 0..n {
                    acc[i] += w[i];
                }
            }
            let phi_next = transition.phi.at(path, k + 1);
            let y = linalg::mat_vec(phi_next, &acc, n, n);
            row[(k + 1) * n..(k + 2) * n].copy_from_slice(&y);
        }
        Ok(())
    })?;
    Ok(out)
}

/// The four spike variational equations, simulated jointly.
pub fn simulate_variational_needle(
    spec: &ProblemSpec,
    state: &StateEnsemble,
    perturbation: &PerturbationSpec,
    ctx: &SimulationContext,
) -> Result<VariationalBundle> {
    if spec.mode != Mode::Needle {
        return Err(Error::DimensionMismatch(
            "spike variational systems require needle mode".into(),
        ));
    }
    let (intervals, spike) = match perturbation {
        PerturbationSpec::Needle { intervals, value } => (intervals.clone(), value.clone()),
        PerturbationSpec::Convex { .. } => {
            return Err(Error::DimensionMismatch(
                "needle simulation requires a spike perturbation".into(),
            ))
        }
    };
    perturbation.validate(spec)?;
    let mask = ctx.step_mask(&intervals);
    let nodes = ctx.steps + 1;
    let v_spike = spike[0];

    let b = &spec.drift.components[0];
    let s = &spec.diffusion.components[0];
    let dx = |p: &Polynomial, k: usize| {
        let mut q = p.clone();
        for _ in 0..k {
            q = q.diff_x(0);
        }
        q
    };
    let b_x = dx(b, 1);
    let b_xx = dx(b, 2);
    let b_xxx = dx(b, 3);
    let b_xxxx = dx(b, 4);
    let s_x = dx(s, 1);
    let s_xx = dx(s, 2);
    let s_xxx = dx(s, 3);
    let s_xxxx = dx(s, 4);

    let mut grids: Vec<Grid2> = (0..4).map(|_| Grid2::zeros(ctx.paths, nodes, 1)).collect();

    let rows: Vec<(usize, [Vec<f64>; 4])> = (0..ctx.paths)
        .into_par_iter()
        .map(|path| {
            let dt = ctx.dt();
            let mut y = [
                vec![0.0; nodes],
                vec![0.0; nodes],
                vec![0.0; nodes],
                vec![0.0; nodes],
            ];
            for k in 0..ctx.steps {
                let t = ctx.time(k);
                let x = state.values.at(path, k);
                let u = state.controls.at(path, k);
                let chi = mask[k];
                let dw = ctx.increment(path, k);

                let bx = b_x.eval(t, x, u);
                let bxx = b_xx.eval(t, x, u);
                let bxxx = b_xxx.eval(t, x, u);
                let bxxxx = b_xxxx.eval(t, x, u);
                let sx = s_x.eval(t, x, u);
                let sxx = s_xx.eval(t, x, u);
                let sxxx = s_xxx.eval(t, x, u);
                let sxxxx = s_xxxx.eval(t, x, u);

                // spike differences at the current point; zero off the set
                let d = if chi {
                    spec.delta_coefficients(t, x[0], u[0], v_spike)?
                } else {
                    crate::problem::DeltaCoefficients {
                        db: 0.0,
                        dsigma: 0.0,
                        db_x: 0.0,
                        dsigma_x: 0.0,
                        db_xx: 0.0,
                        dsigma_xx: 0.0,
                        dsigma_xxx: 0.0,
                    }
                };

                let (y1, y2, y3, y4) = (y[0][k], y[1][k], y[2][k], y[3][k]);

                let drift1 = bx * y1;
                let diff1 = sx * y1 + d.dsigma;

                let drift2 = bx * y2 + 0.5 * bxx * y1 * y1 + d.db;
                let diff2 = sx * y2 + 0.5 * sxx * y1 * y1 + d.dsigma_x * y1;

                let mix12 = 2.0 * y1 * y2 + y2 * y2;
                let drift3 =
                    bx * y3 + 0.5 * bxx * mix12 + bxxx * y1 * y1 * y1 / 6.0 + d.db_x * y1;
                let diff3 = sx * y3
                    + 0.5 * sxx * mix12
                    + sxxx * y1 * y1 * y1 / 6.0
                    + d.dsigma_x * y2
                    + 0.5 * d.dsigma_xx * y1 * y1;

                let mix134 = 2.0 * y1 * y3 + 2.0 * y2 * y3 + y3 * y3;
                let cubic = 3.0 * y1 * y1 * y2 + 3.0 * y1 * y2 * y2 + y2 * y2 * y2;
                let drift4 = bx * y4
                    + 0.5 * bxx * mix134
                    + bxxx * cubic / 6.0
                    + bxxxx * y1 * y1 * y1 * y1 / 24.0
                    + d.db_x * y2
                    + 0.5 * d.db_xx * y1 * y1;
                let diff4 = sx * y4
                    + 0.5 * sxx * mix134
                    + sxxx * cubic / 6.0
                    + sxxxx * y1 * y1 * y1 * y1 / 24.0
                    + d.dsigma_x * y3
                    + 0.5 * d.dsigma_xx * mix12
                    + d.dsigma_xxx * y1 * y1 * y1 / 6.0;

                y[0][k + 1] = y1 + drift1 * dt + diff1 * dw;
                y[1][k + 1] = y2 + drift2 * dt + diff2 * dw;
                y[2][k + 1] = y3 + drift3 * dt + diff3 * dw;
                y[3][k + 1] = y4 + drift4 * dt + diff4 * dw;
                for comp in &y {
                    if !comp[k + 1].is_finite() || comp[k + 1].abs() > BLOWUP_GUARD {
                        return Err(Error::NonFinite {
                            path,
                            step: k + 1,
                            guard: BLOWUP_GUARD,
                        });
                    }
                }
            }
            Ok((path, y))
        })
        .collect::<Result<Vec<_>>>()?;

    for (path, y) in rows {
        for (g, comp) in grids.iter_mut().zip(y.iter()) {
            for (k, &value) in comp.iter().enumerate() {
                g.set_scalar(path, k, value);
            }
        }
    }

    Ok(VariationalBundle {
        mode: Mode::Needle,
        components: grids,
        perturbation: perturbation.clone(),
    })
}

/// Trapezoid cost of every path: integral of the running cost along the grid
/// plus the terminal cost. Returns one value per path.
pub fn pathwise_cost(spec: &ProblemSpec, state: &StateEnsemble, ctx: &SimulationContext) -> Vec<f64> {
    let dt = ctx.dt();
    (0..state.paths())
        .map(|path| {
            let mut acc = 0.0;
            let mut prev = spec.running_cost.eval(
                ctx.time(0),
                state.values.at(path, 0),
                state.controls.at(path, 0),
            );
            for k in 1..=ctx.steps {
                let cur = spec.running_cost.eval(
                    ctx.time(k),
                    state.values.at(path, k),
                    state.controls.at(path, k),
                );
                acc += 0.5 * (prev + cur) * dt;
                prev = cur;
            }
            acc + spec
                .terminal_cost
                .eval(0.0, state.values.at(path, ctx.steps), &vec![0.0; spec.control_dim])
        })
        .collect()
}

/// Dump an ensemble as CSV rows (path, step, t, components...).
pub fn ensemble_csv(grid: &Grid2, ctx: &SimulationContext, header: &str) -> String {
    let mut out = String::new();
    out.push_str("path,step,t");
    for i in 0..grid.dim {
        out.push_str(&format!(",{header}{i}"));
    }
    out.push('\n');
    for path in 0..grid.paths {
        for k in 0..grid.nodes {
            out.push_str(&format!("{path},{k},{}", ctx.time(k.min(ctx.steps))));
            for v in grid.at(path, k) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}
