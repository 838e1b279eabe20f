//! Short-interval solves of the fully coupled FBSDE on a moment-matched noise lattice.
//!
//! One step of length `delta` from `(t, x)` freezes `(Y, Z)` inside the
//! coefficients, propagates the forward state to the lattice successors
//!
//! ```text
//! X+_j = x + b(t, x, Y, Z, u) delta + sigma(t, x, Y, Z, u) sqrt(delta) xi_j
//! ```
//!
//! and updates `Y' = E[psi(X+)] + f(t, x, Y, Z, u) delta`,
//! `Z' = E[psi(X+) xi] / sqrt(delta)` until the map settles. The fixed point is
//! the lattice value of the backward semigroup applied to `psi`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldSequence, ValueField};
use crate::grid::{GridPair, Interpolant, SpaceLattice};
use crate::model::ControlProblem;
use crate::report::SolveReport;

/// Finite surrogate of a normalized Brownian increment `(B_{t+h} - B_t) / sqrt(h)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLattice {
    dim: usize,
    /// Row-major `len x dim`.
    outcomes: Vec<f64>,
    probs: Vec<f64>,
}

impl NoiseLattice {
    /// Tensor product of `{-sqrt 3, 0, sqrt 3}` with weights `{1/6, 2/3, 1/6}`.
    pub fn trinomial(dim: usize) -> Self {
        let s3 = 3.0_f64.sqrt();
        Self::product(dim, &[-s3, 0.0, s3], &[1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
    }

    /// Tensor product of `{-1, 1}` with equal weights.
    pub fn bernoulli(dim: usize) -> Self {
        Self::product(dim, &[-1.0, 1.0], &[0.5, 0.5])
    }

    fn product(dim: usize, points: &[f64], weights: &[f64]) -> Self {
        assert!(dim >= 1);
        let per = points.len();
        let len = per.pow(dim as u32);
        let mut outcomes = Vec::with_capacity(len * dim);
        let mut probs = Vec::with_capacity(len);
        for j in 0..len {
            let mut rest = j;
            let mut p = 1.0;
            for _ in 0..dim {
                let k = rest % per;
                rest /= per;
                outcomes.push(points[k]);
                p *= weights[k];
            }
            probs.push(p);
        }
        Self {
            dim,
            outcomes,
            probs,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn outcome(&self, j: usize) -> &[f64] {
        &self.outcomes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.probs[j]
    }

    pub fn max_abs(&self) -> f64 {
        self.outcomes.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest deviations from `sum p = 1`, zero mean and identity covariance.
    pub fn moment_errors(&self) -> (f64, f64, f64) {
        let total: f64 = self.probs.iter().sum();
        let mut mean_err: f64 = 0.0;
        let mut cov_err: f64 = 0.0;
        for a in 0..self.dim {
            let m: f64 = (0..self.len())
                .map(|j| self.probs[j] * self.outcome(j)[a])
                .sum();
            mean_err = mean_err.max(m.abs());
            for b in 0..self.dim {
                let c: f64 = (0..self.len())
                    .map(|j| self.probs[j] * self.outcome(j)[a] * self.outcome(j)[b])
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                cov_err = cov_err.max((c - target).abs());
            }
        }
        ((total - 1.0).abs(), mean_err, cov_err)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepOptions {
    /// Bound on `|Y' - Y| + |Z' - Z|` at termination.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for OneStepOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepSolution {
    pub y: f64,
    pub z: Vec<f64>,
    /// Row-major `lattice.len() x n` successor states at the fixed point.
    pub successors: Vec<f64>,
    pub iterations: usize,
    pub final_update: f64,
    /// `|v_k - v_{k-1}| / |v_{k-1} - v_{k-2}|` over the last three iterates,
    /// measured in the norm `|dY| + sqrt(delta) |dZ|`.
    pub contraction_ratio: f64,
}

impl OneStepSolution {
    pub fn successor(&self, j: usize, n: usize) -> &[f64] {
        &self.successors[j * n..(j + 1) * n]
    }
}

struct Workspace {
    b: Vec<f64>,
    sigma: Vec<f64>,
    xp: Vec<f64>,
    psi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn forward(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    y: f64,
    z: &[f64],
    u: f64,
    delta: f64,
    lattice: &NoiseLattice,
    ws: &mut Workspace,
) -> f64 {
    let (n, d) = (problem.n, problem.d);
    problem.drift(t, x, y, z, u, &mut ws.b);
    problem.diffusion(t, x, y, z, u, &mut ws.sigma);
    let sq = delta.sqrt();
    for j in 0..lattice.len() {
        let xi = lattice.outcome(j);
        for (i, xi0) in x.iter().enumerate() {
            let noise: f64 = (0..d).map(|k| ws.sigma[i * d + k] * xi[k]).sum();
            ws.xp[j * n + i] = xi0 + ws.b[i] * delta + noise * sq;
        }
    }
    problem.driver(t, x, y, z, u)
}

/// Fixed point of the frozen-coefficient one-step map at `(t, x)` under control `u`.
#[allow(clippy::too_many_arguments)]
pub fn one_step_solve(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    u: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<OneStepSolution> {
    let (n, d) = (problem.n, problem.d);
    if x.len() != n {
        return Err(Error::Dimension {
            what: "x",
            expected: n,
            actual: x.len(),
        });
    }
    if lattice.dim() != d {
        return Err(Error::Dimension {
            what: "noise lattice",
            expected: d,
            actual: lattice.dim(),
        });
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::input(format!(
            "one-step length must be positive, got {delta}"
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::input("max_iter must be at least 1"));
    }
    let m = lattice.len();
    let mut ws = Workspace {
        b: vec![0.0; n],
        sigma: vec![0.0; n * d],
        xp: vec![0.0; m * n],
        psi: vec![0.0; m],
    };
    let sq = delta.sqrt();
    let mut y = psi(x);
    if !y.is_finite() {
        return Err(Error::input(format!(
            "terminal value not finite at x = {x:?}"
        )));
    }
    let mut z = vec![0.0; d];
    let mut z_new = vec![0.0; d];
    let mut prev_weighted = f64::NAN;
    let mut ratio = 0.0;
    let mut update = f64::INFINITY;
    let non_contraction = |iterations: usize, update: f64, ratio: f64| Error::NonContraction {
        t,
        x: x.to_vec(),
        iterations,
        update,
        ratio,
    };
    for it in 1..=opts.max_iter {
        let fv = forward(problem, t, x, y, &z, u, delta, lattice, &mut ws);
        let coeffs_finite = fv.is_finite() && ws.b.iter().chain(&ws.sigma).all(|v| v.is_finite());
        if !coeffs_finite {
            if it == 1 {
                return Err(Error::input(format!(
                    "non-finite coefficient value at t = {t}, x = {x:?}"
                )));
            }
            return Err(non_contraction(it, update, ratio));
        }
        let mut mean = 0.0;
        for j in 0..m {
            let v = psi(&ws.xp[j * n..(j + 1) * n]);
            ws.psi[j] = v;
            mean += lattice.prob(j) * v;
        }
        for (k, zk) in z_new.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..m {
                acc += lattice.prob(j) * (ws.psi[j] - mean) * lattice.outcome(j)[k];
            }
            *zk = acc / sq;
        }
        let y_new = mean + fv * delta;
        let dz: f64 = z_new.iter().zip(&z).map(|(a, b)| (a - b).abs()).sum();
        let dy = (y_new - y).abs();
        update = dy + dz;
        if !update.is_finite() {
            return Err(non_contraction(it, update, ratio));
        }
        let weighted = dy + sq * dz;
        ratio = if it == 1 || prev_weighted <= 64.0 * f64::EPSILON * (1.0 + y.abs()) {
            0.0
        } else {
            weighted / prev_weighted
        };
        prev_weighted = weighted;
        y = y_new;
        z.copy_from_slice(&z_new);
        if update <= opts.tolerance {
            forward(problem, t, x, y, &z, u, delta, lattice, &mut ws);
            return Ok(OneStepSolution {
                y,
                z,
                successors: ws.xp,
                iterations: it,
                final_update: update,
                contraction_ratio: ratio,
            });
        }
    }
    Err(non_contraction(opts.max_iter, update, ratio))
}

/// Counts successors outside `lattice` and folds the solve into `report`.
pub(crate) fn record(report: &mut SolveReport, sol: &OneStepSolution, lattice: &SpaceLattice) {
    report.one_step_solves += 1;
    report.total_iterations += sol.iterations as u64;
    report.max_iterations = report.max_iterations.max(sol.iterations);
    report.max_contraction_ratio = report.max_contraction_ratio.max(sol.contraction_ratio);
    report.max_final_update = report.max_final_update.max(sol.final_update);
    report.extrapolations += sol
        .successors
        .iter()
        .filter(|x| !lattice.contains(**x))
        .count() as u64;
}

/// Auxiliary lattice around `x` covering the reach of `substeps` lattice steps.
#[allow(clippy::too_many_arguments)]
fn auxiliary_lattice(
    problem: &ControlProblem,
    t: f64,
    x: f64,
    h: f64,
    u: f64,
    y0: f64,
    substeps: usize,
    lattice: &NoiseLattice,
) -> SpaceLattice {
    let b0 = problem.drift1(t, x, y0, 0.0, u);
    let s0 = problem.diffusion1(t, x, y0, 0.0, u);
    let reach = b0.abs() * h + lattice.max_abs() * s0.abs().max(1.0) * h.sqrt();
    let half = (2.0 * substeps as f64 * reach).max(1e-6);
    SpaceLattice::with_cells(x - half, x + half, 16 * substeps)
}

struct Layers {
    lattice: SpaceLattice,
    /// `values[k - 1]` holds layer `k = 1..substeps-1`.
    values: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn build_layers(
    problem: &ControlProblem,
    t: f64,
    x: f64,
    h: f64,
    u: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    substeps: usize,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
    report: &mut SolveReport,
) -> Result<Layers> {
    let aux = auxiliary_lattice(problem, t, x, h, u, psi(&[x]), substeps, lattice);
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); substeps.saturating_sub(1)];
    for k in (1..substeps).rev() {
        let tk = t + k as f64 * h;
        let mut layer = Vec::with_capacity(aux.len());
        for &xa in aux.nodes() {
            let sol = if k + 1 == substeps {
                one_step_solve(problem, tk, &[xa], h, u, psi, lattice, opts)?
            } else {
                let next = Interpolant::new(&aux, &values[k]);
                let f = move |p: &[f64]| next.eval(p[0]);
                one_step_solve(problem, tk, &[xa], h, u, &f, lattice, opts)?
            };
            record(report, &sol, &aux);
            layer.push(sol.y);
        }
        values[k - 1] = layer;
    }
    Ok(Layers {
        lattice: aux,
        values,
    })
}

/// Backward semigroup over `[t, t + delta]` applied to `psi`, by recursion over
/// `substeps` equal subintervals.
#[allow(clippy::too_many_arguments)]
pub fn semigroup_apply(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    u: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    substeps: usize,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<f64> {
    let mut report = SolveReport::default();
    semigroup_apply_reported(
        problem,
        t,
        x,
        delta,
        u,
        psi,
        substeps,
        lattice,
        opts,
        &mut report,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn semigroup_apply_reported(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    delta: f64,
    u: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    substeps: usize,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
    report: &mut SolveReport,
) -> Result<f64> {
    if substeps == 0 {
        return Err(Error::input("substeps must be positive"));
    }
    if substeps == 1 {
        let sol = one_step_solve(problem, t, x, delta, u, psi, lattice, opts)?;
        report.one_step_solves += 1;
        report.total_iterations += sol.iterations as u64;
        report.max_iterations = report.max_iterations.max(sol.iterations);
        report.max_contraction_ratio = report.max_contraction_ratio.max(sol.contraction_ratio);
        report.max_final_update = report.max_final_update.max(sol.final_update);
        return Ok(sol.y);
    }
    problem.require_scalar("multi-step semigroup")?;
    let h = delta / substeps as f64;
    let layers = build_layers(problem, t, x[0], h, u, psi, substeps, lattice, opts, report)?;
    let first = Interpolant::new(&layers.lattice, &layers.values[0]);
    let f = move |p: &[f64]| first.eval(p[0]);
    let sol = one_step_solve(problem, t, x, h, u, &f, lattice, opts)?;
    record(report, &sol, &layers.lattice);
    Ok(sol.y)
}

/// Second-moment functionals of the lattice tree on `[t, t + delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeMoments {
    /// `E sup_s |X_s - x|^2`
    pub sup_dev_x2: f64,
    /// `E sup_s |X_s|^2`
    pub sup_x2: f64,
    /// `E sup_s |Y_s|^2`
    pub sup_y2: f64,
    /// `E sum_k |Z_k|^2 h`
    pub z_energy: f64,
    /// `Y_t`
    pub y0: f64,
}

/// Exact path expectations over the `lattice.len()^substeps` tree paths.
#[allow(clippy::too_many_arguments)]
pub fn tree_moments(
    problem: &ControlProblem,
    t: f64,
    x: f64,
    delta: f64,
    u: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
    substeps: usize,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<TreeMoments> {
    problem.require_scalar("tree moments")?;
    if substeps == 0 || substeps > 10 {
        return Err(Error::input("tree moments need 1..=10 substeps"));
    }
    let h = delta / substeps as f64;
    let mut report = SolveReport::default();
    let layers = build_layers(
        problem,
        t,
        x,
        h,
        u,
        psi,
        substeps,
        lattice,
        opts,
        &mut report,
    )?;
    let mut acc = TreeMoments {
        sup_dev_x2: 0.0,
        sup_x2: 0.0,
        sup_y2: 0.0,
        z_energy: 0.0,
        y0: 0.0,
    };
    struct Path {
        prob: f64,
        sup_dev: f64,
        sup_x: f64,
        sup_y: f64,
        z_energy: f64,
    }
    #[allow(clippy::too_many_arguments)]
    fn walk(
        problem: &ControlProblem,
        layers: &Layers,
        psi: &(dyn Fn(&[f64]) -> f64 + Sync),
        lattice: &NoiseLattice,
        opts: &OneStepOptions,
        t: f64,
        x0: f64,
        h: f64,
        u: f64,
        k: usize,
        substeps: usize,
        xk: f64,
        path: Path,
        acc: &mut TreeMoments,
    ) -> Result<()> {
        let dev = (xk - x0).powi(2);
        let sup_dev = path.sup_dev.max(dev);
        let sup_x = path.sup_x.max(xk * xk);
        if k == substeps {
            let y = psi(&[xk]);
            acc.sup_dev_x2 += path.prob * sup_dev;
            acc.sup_x2 += path.prob * sup_x;
            acc.sup_y2 += path.prob * path.sup_y.max(y * y);
            acc.z_energy += path.prob * path.z_energy;
            return Ok(());
        }
        let sol = if k + 1 == substeps {
            one_step_solve(problem, t + k as f64 * h, &[xk], h, u, psi, lattice, opts)?
        } else {
            let next = Interpolant::new(&layers.lattice, &layers.values[k]);
            let f = move |p: &[f64]| next.eval(p[0]);
            one_step_solve(problem, t + k as f64 * h, &[xk], h, u, &f, lattice, opts)?
        };
        if k == 0 {
            acc.y0 = sol.y;
        }
        let z2: f64 = sol.z.iter().map(|v| v * v).sum();
        for j in 0..lattice.len() {
            let next = Path {
                prob: path.prob * lattice.prob(j),
                sup_dev,
                sup_x,
                sup_y: path.sup_y.max(sol.y * sol.y),
                z_energy: path.z_energy + z2 * h,
            };
            walk(
                problem,
                layers,
                psi,
                lattice,
                opts,
                t,
                x0,
                h,
                u,
                k + 1,
                substeps,
                sol.successor(j, 1)[0],
                next,
                acc,
            )?;
        }
        Ok(())
    }
    let start = Path {
        prob: 1.0,
        sup_dev: 0.0,
        sup_x: 0.0,
        sup_y: 0.0,
        z_energy: 0.0,
    };
    walk(
        problem, &layers, psi, lattice, opts, t, x, h, u, 0, substeps, x, start, &mut acc,
    )?;
    Ok(acc)
}

/// A feedback control `(slice index, t, x) -> u`.
pub trait Feedback: Sync {
    fn control(&self, slice: usize, t: f64, x: f64) -> f64;
}

impl<F: Fn(usize, f64, f64) -> f64 + Sync> Feedback for F {
    fn control(&self, slice: usize, t: f64, x: f64) -> f64 {
        self(slice, t, x)
    }
}

/// The same control at every node and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantControl(pub f64);

impl Feedback for ConstantControl {
    fn control(&self, _slice: usize, _t: f64, _x: f64) -> f64 {
        self.0
    }
}

/// Field built from one backward step per node: `(values, slice report)`.
pub(crate) fn backward_slice<F>(lattice: &SpaceLattice, node: F) -> Result<(Vec<f64>, SolveReport)>
where
    F: Fn(usize, f64) -> Result<(f64, SolveReport)> + Sync,
{
    let results: Vec<(f64, SolveReport)> = lattice
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(k, &x)| node(k, x))
        .collect::<Result<_>>()?;
    let mut report = SolveReport::default();
    let values = results
        .into_iter()
        .map(|(v, r)| {
            report.merge(&r);
            v
        })
        .collect();
    Ok((values, report))
}

/// Cost-functional fields `J(t_i, .)` of a fixed feedback policy, computed backward
/// from `J(T, .) = terminal`.
pub fn solve_fixed_control(
    problem: &ControlProblem,
    policy: &dyn Feedback,
    grids: &GridPair,
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<FieldSequence> {
    problem.require_scalar("fixed-control solver")?;
    let space: &Arc<SpaceLattice> = &grids.space;
    let steps = grids.time.steps();
    let dt = grids.dt();
    let terminal_values: Vec<f64> = space.nodes().iter().map(|x| terminal(&[*x])).collect();
    let mut fields = vec![ValueField::new(
        steps,
        grids.time.time(steps),
        space.clone(),
        terminal_values,
    )];
    let mut report = SolveReport::default();
    for i in (0..steps).rev() {
        let t = grids.time.time(i);
        let next = fields.last().expect("terminal slice");
        let interp = next.interpolant();
        let psi = move |p: &[f64]| interp.eval(p[0]);
        let (values, slice_report) = backward_slice(space, |_, x| {
            let u = policy.control(i, t, x);
            let sol = one_step_solve(problem, t, &[x], dt, u, &psi, lattice, opts)?;
            let mut r = SolveReport::default();
            record(&mut r, &sol, space);
            Ok((sol.y, r))
        })?;
        report.merge(&slice_report);
        let extrapolated = slice_report.extrapolations;
        if extrapolated > 0 {
            log::debug!("slice {i}: {extrapolated} successors extrapolated past the box");
        }
        let mut field = ValueField::new(i, t, space.clone(), values);
        field.report = slice_report;
        fields.push(field);
    }
    fields.reverse();
    Ok(FieldSequence { fields, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{identity_terminal, ExprCoefficients};

    fn problem(b: &str, s: &str, f: &str) -> ControlProblem {
        let c = ExprCoefficients::parse(b, s, f).unwrap();
        ControlProblem::builder(Arc::new(c), identity_terminal())
            .build()
            .unwrap()
    }

    fn opts() -> OneStepOptions {
        OneStepOptions::default()
    }

    #[test]
    fn lattice_moments() {
        for lat in [
            NoiseLattice::trinomial(1),
            NoiseLattice::trinomial(2),
            NoiseLattice::bernoulli(3),
        ] {
            let (s, m, c) = lat.moment_errors();
            assert!(s < 1e-14 && m < 1e-14 && c < 1e-14, "{s} {m} {c}");
            assert!((0..lat.len()).all(|j| lat.prob(j) >= 0.0));
        }
        assert_eq!(NoiseLattice::trinomial(2).len(), 9);
    }

    #[test]
    fn zero_coefficients_one_iteration() {
        let p = problem("0", "0", "0");
        let psi = |x: &[f64]| x[0].sin();
        let s = one_step_solve(
            &p,
            0.0,
            &[0.4],
            0.01,
            0.0,
            &psi,
            &NoiseLattice::trinomial(1),
            &opts(),
        )
        .unwrap();
        assert!((s.y - 0.4_f64.sin()).abs() < 1e-15);
        assert!(s.z[0].abs() < 1e-15);
        assert_eq!(s.iterations, 1);
        assert_eq!(s.contraction_ratio, 0.0);
    }

    #[test]
    fn unit_diffusion_linear_terminal() {
        let p = problem("0", "1", "0");
        let psi = |x: &[f64]| x[0];
        for &delta in &[1e-4, 1e-2, 0.5] {
            let s = one_step_solve(
                &p,
                0.0,
                &[0.7],
                delta,
                0.0,
                &psi,
                &NoiseLattice::trinomial(1),
                &opts(),
            )
            .unwrap();
            assert!((s.y - 0.7).abs() < 1e-14);
            assert!((s.z[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_driver_shifts_y() {
        let c = 2.5;
        let p = problem("0", "1", "2.5");
        let psi = |x: &[f64]| x[0];
        let delta = 0.01;
        let s = one_step_solve(
            &p,
            0.0,
            &[-0.3],
            delta,
            0.0,
            &psi,
            &NoiseLattice::trinomial(1),
            &opts(),
        )
        .unwrap();
        assert!((s.y - (-0.3 + c * delta)).abs() < 1e-14);
        assert!((s.z[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_coefficient_is_input_error() {
        let p = problem("0", "1", "0");
        let psi = |_: &[f64]| f64::NAN;
        let r = one_step_solve(
            &p,
            0.0,
            &[0.0],
            0.01,
            0.0,
            &psi,
            &NoiseLattice::trinomial(1),
            &opts(),
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn strong_z_coupling_fails_to_contract() {
        let p = ControlProblem::example_5_2(10.0).unwrap();
        let psi = |x: &[f64]| x[0];
        let r = one_step_solve(
            &p,
            0.0,
            &[1.0],
            1e-3,
            0.0,
            &psi,
            &NoiseLattice::trinomial(1),
            &opts(),
        );
        assert!(matches!(r, Err(Error::NonContraction { .. })), "{r:?}");
    }

    #[test]
    fn semigroup_single_substep_matches_one_step() {
        let p = ControlProblem::example_5_1();
        let psi = |x: &[f64]| x[0];
        let lat = NoiseLattice::trinomial(1);
        let s = one_step_solve(&p, 0.0, &[0.3], 1e-3, 0.5, &psi, &lat, &opts()).unwrap();
        let g = semigroup_apply(&p, 0.0, &[0.3], 1e-3, 0.5, &psi, 1, &lat, &opts()).unwrap();
        assert_eq!(s.y, g);
    }

    #[test]
    fn semigroup_zero_coefficients_is_identity() {
        let p = problem("0", "0", "0");
        let psi = |x: &[f64]| 1.0 + x[0] * x[0];
        for substeps in 1..4 {
            let g = semigroup_apply(
                &p,
                0.0,
                &[0.5],
                0.1,
                0.0,
                &psi,
                substeps,
                &NoiseLattice::trinomial(1),
                &opts(),
            )
            .unwrap();
            assert!((g - 1.25).abs() < 1e-12, "substeps {substeps}: {g}");
        }
    }

    #[test]
    fn semigroup_refinement_consistency_example_5_1() {
        let p = ControlProblem::example_5_1();
        let psi = |x: &[f64]| x[0];
        let lat = NoiseLattice::trinomial(1);
        let one = semigroup_apply(&p, 0.0, &[0.0], 1e-3, 0.0, &psi, 1, &lat, &opts()).unwrap();
        let two = semigroup_apply(&p, 0.0, &[0.0], 1e-3, 0.0, &psi, 2, &lat, &opts()).unwrap();
        assert!((one - two).abs() < 5e-3, "{one} vs {two}");
    }

    #[test]
    fn fixed_control_zero_coefficients() {
        let p = problem("0", "0", "0");
        let grids = GridPair::build(0.1, 0.02, -1.0, 1.0, 0.1).unwrap();
        let phi = |x: &[f64]| x[0].cos();
        let seq = solve_fixed_control(
            &p,
            &ConstantControl(0.0),
            &grids,
            &phi,
            &NoiseLattice::trinomial(1),
            &opts(),
        )
        .unwrap();
        assert_eq!(seq.len(), 6);
        for f in &seq.fields {
            for (x, v) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((v - x.cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_control_linear_driver() {
        let p = problem("0", "1", "1");
        let grids = GridPair::build(0.2, 0.01, -2.0, 2.0, 0.05).unwrap();
        let phi = |x: &[f64]| x[0];
        let seq = solve_fixed_control(
            &p,
            &ConstantControl(0.0),
            &grids,
            &phi,
            &NoiseLattice::trinomial(1),
            &opts(),
        )
        .unwrap();
        for f in &seq.fields {
            for (x, v) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((v - (x + 0.2 - f.time)).abs() < 1e-10);
            }
        }
        assert!(seq.report.extrapolations > 0);
    }

    #[test]
    fn tree_moments_scale_with_delta() {
        let p = problem("0", "1", "0");
        let psi = |x: &[f64]| x[0];
        let lat = NoiseLattice::trinomial(1);
        let m = tree_moments(&p, 0.0, 0.0, 0.04, 0.0, &psi, 3, &lat, &opts()).unwrap();
        // Z = 1 on every path
        assert!((m.z_energy - 0.04).abs() < 1e-10);
        assert!(m.sup_dev_x2 >= 0.04 - 1e-12);
        assert!(m.y0.abs() < 1e-12);
    }
}
