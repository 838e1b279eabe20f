//! Explicit finite-difference solvers for the HJB equation
//!
//! ```text
//! W_t + sup_u { p b(t, x, W, z, u) + 1/2 tr(sigma sigma^T M) + f(t, x, W, z, u) } = 0,   W(T, .) = Phi
//! ```
//!
//! with `p = DW`, `M = D^2 W`. When `sigma` depends on the control but not on `z`,
//! the `z` slot is `z = p sigma(t, x, W, u)`. When `sigma` depends on `z` but not
//! on the control, `z = V` solves the algebraic equation `V = DW sigma(t, x, W, V)`
//! at every node.
//!
//! Time stepping is explicit Euler with central differences; ghost nodes at the
//! box ends continue the field linearly, so the boundary gradient is one-sided
//! and the boundary curvature vanishes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebraic::{h_representation, AlgebraicConfig};
use crate::error::{Error, Result};
use crate::field::{FieldSequence, ValueField};
use crate::grid::{GridPair, SpaceLattice};
use crate::model::ControlProblem;
use crate::report::SolveReport;

/// Headroom between the CFL number planned on terminal data and the hard limit.
pub const CFL_MARGIN: f64 = 2.0;

/// Step sizes of the explicit scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdScheme {
    pub dx: f64,
    /// PDE time step; divides the grid step exactly.
    pub dt: f64,
    /// Safety factor on `dt sigma^2 / dx^2`.
    pub theta: f64,
    /// PDE steps per grid time step.
    pub substeps: usize,
    /// Largest `sigma^2` met on the terminal data.
    pub sigma2_max: f64,
}

impl FdScheme {
    /// Chooses `dt = theta dx^2 / (CFL_MARGIN sigma2_max)`, rounded down to divide
    /// the grid step, with `sigma2_max` scanned on the terminal data.
    pub fn plan(problem: &ControlProblem, grids: &GridPair, theta: f64) -> Result<Self> {
        problem.require_scalar("finite-difference solver")?;
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::Config(format!(
                "CFL safety factor must lie in (0, 1], got {theta}"
            )));
        }
        let space = &grids.space;
        let t = grids.time.horizon();
        let w: Vec<f64> = space
            .nodes()
            .iter()
            .map(|x| problem.terminal_value(&[*x]))
            .collect();
        let algebraic = AlgebraicConfig::default();
        let mut sigma2_max: f64 = 0.0;
        for (k, &x) in space.nodes().iter().enumerate() {
            let (p, _) = derivatives(&w, k, space.step());
            let z = if problem.sigma_depends_on_z {
                companion_algebraic(problem, t, x, w[k], p.max(0.0), &algebraic)?.0
            } else {
                0.0
            };
            for &u in &problem.control_set {
                let s = problem.diffusion1(t, x, w[k], z, u);
                sigma2_max = sigma2_max.max(s * s);
            }
        }
        if !sigma2_max.is_finite() {
            return Err(Error::Cfl(
                "diffusion is not finite on the terminal data".into(),
            ));
        }
        let delta = grids.dt();
        let dx = space.step();
        let substeps = if sigma2_max == 0.0 {
            1
        } else {
            let limit = theta * dx * dx / (CFL_MARGIN * sigma2_max);
            (delta / limit).ceil().max(1.0) as usize
        };
        Ok(Self {
            dx,
            dt: delta / substeps as f64,
            theta,
            substeps,
            sigma2_max,
        })
    }

    pub fn cfl_number(&self, sigma2: f64) -> f64 {
        self.dt * sigma2 / (self.dx * self.dx)
    }
}

/// Central first and second differences at node `k`, with linear ghost nodes.
fn derivatives(w: &[f64], k: usize, dx: f64) -> (f64, f64) {
    let last = w.len() - 1;
    if k == 0 {
        ((w[1] - w[0]) / dx, 0.0)
    } else if k == last {
        ((w[last] - w[last - 1]) / dx, 0.0)
    } else {
        (
            (w[k + 1] - w[k - 1]) / (2.0 * dx),
            (w[k + 1] - 2.0 * w[k] + w[k - 1]) / (dx * dx),
        )
    }
}

/// `p b(t, x, w, z, u) + 1/2 tr(sigma sigma^T M) + f(t, x, w, z, u)` with `z = p sigma`.
///
/// `p` has length `n`, `m` is the `n x n` Hessian row-major.
pub fn hamiltonian_case1(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    w: f64,
    p: &[f64],
    m: &[f64],
    u: f64,
) -> Result<f64> {
    let (n, d) = (problem.n, problem.d);
    for (what, len, want) in [("x", x.len(), n), ("p", p.len(), n), ("M", m.len(), n * n)] {
        if len != want {
            return Err(Error::Dimension {
                what,
                expected: want,
                actual: len,
            });
        }
    }
    if problem.sigma_depends_on_z {
        return Err(Error::input("first HJB form needs sigma independent of z"));
    }
    let mut sigma = vec![0.0; n * d];
    problem.diffusion(t, x, w, &vec![0.0; d], u, &mut sigma);
    let z: Vec<f64> = (0..d)
        .map(|k| (0..n).map(|i| p[i] * sigma[i * d + k]).sum())
        .collect();
    let mut b = vec![0.0; n];
    problem.drift(t, x, w, &z, u, &mut b);
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            let ss: f64 = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            trace += ss * m[i * n + j];
        }
    }
    let pb: f64 = p.iter().zip(&b).map(|(p, b)| p * b).sum();
    Ok(pb + 0.5 * trace + problem.driver(t, x, w, &z, u))
}

/// Scalar form of [`hamiltonian_case1`]; also returns `sigma^2`.
#[inline]
fn hamiltonian1(
    problem: &ControlProblem,
    t: f64,
    x: f64,
    w: f64,
    p: f64,
    m: f64,
    u: f64,
) -> (f64, f64) {
    let s = problem.diffusion1(t, x, w, 0.0, u);
    let z = p * s;
    let h = p * problem.drift1(t, x, w, z, u) + 0.5 * s * s * m + problem.driver1(t, x, w, z, u);
    (h, s * s)
}

/// Companion value `V` at one node given the (clamped) gradient `a`, with the
/// number of algebraic iterations spent.
pub type CompanionFn<'a> = dyn Fn(f64, f64, f64, f64) -> Result<(f64, usize)> + Sync + 'a;

fn companion_algebraic(
    problem: &ControlProblem,
    t: f64,
    x: f64,
    w: f64,
    a: f64,
    config: &AlgebraicConfig,
) -> Result<(f64, usize)> {
    let dphi = move |_: f64, _: &[f64], out: &mut [f64]| out[0] = a;
    let phi = |_: f64, _: &[f64]| 0.0;
    let sol =
        h_representation(problem, t, &[x], w, &[0.0], &dphi, &phi, config).map_err(
            |e| match e {
                Error::NonConvergence {
                    residual,
                    iterations,
                    ..
                } => Error::NonConvergence {
                    residual,
                    iterations,
                    location: Some(format!("t = {t}, x = {x}")),
                },
                other => other,
            },
        )?;
    Ok((sol.z[0], sol.iterations))
}

struct NodeUpdate {
    value: f64,
    sigma2: f64,
    clamped: bool,
    algebraic_iterations: usize,
}

fn march<F>(
    problem: &ControlProblem,
    grids: &GridPair,
    scheme: &FdScheme,
    node: F,
    mut finish: impl FnMut(&mut ValueField) -> Result<()>,
) -> Result<FieldSequence>
where
    F: Fn(f64, &SpaceLattice, &[f64], usize) -> Result<NodeUpdate> + Sync,
{
    let space = grids.space.clone();
    let steps = grids.time.steps();
    let mut w: Vec<f64> = space
        .nodes()
        .iter()
        .map(|x| problem.terminal_value(&[*x]))
        .collect();
    let mut terminal = ValueField::new(steps, grids.time.time(steps), space.clone(), w.clone());
    finish(&mut terminal)?;
    let mut fields = vec![terminal];
    let mut report = SolveReport::default();
    for i in (0..steps).rev() {
        let t_hi = grids.time.time(i + 1);
        let mut slice_report = SolveReport::default();
        for s in 0..scheme.substeps {
            let t = t_hi - s as f64 * scheme.dt;
            let updates: Vec<NodeUpdate> = (0..space.len())
                .into_par_iter()
                .map(|k| node(t, &space, &w, k))
                .collect::<Result<_>>()?;
            for (k, up) in updates.iter().enumerate() {
                let cfl = scheme.cfl_number(up.sigma2);
                if cfl > 1.0 {
                    return Err(Error::Cfl(format!(
                        "dt sigma^2 / dx^2 = {cfl:.3} > 1 at t = {t}, x = {}",
                        space.nodes()[k]
                    )));
                }
                slice_report.max_cfl_number = slice_report.max_cfl_number.max(cfl);
                slice_report.gradient_nodes += 1;
                slice_report.clamped_nodes += up.clamped as u64;
                if up.algebraic_iterations > 0 {
                    slice_report.algebraic_solves += 1;
                    slice_report.algebraic_iterations += up.algebraic_iterations as u64;
                }
                let next = w[k] + scheme.dt * up.value;
                if !next.is_finite() {
                    return Err(Error::BlowUp { slice: i, node: k });
                }
                w[k] = next;
            }
            slice_report.pde_steps += 1;
        }
        let mut field = ValueField::new(i, grids.time.time(i), space.clone(), w.clone());
        finish(&mut field)?;
        if let Some(r) = &field.residual {
            slice_report.max_algebraic_residual = r
                .iter()
                .fold(slice_report.max_algebraic_residual, |m, v| m.max(*v));
        }
        field.report.merge(&slice_report);
        report.merge(&slice_report);
        fields.push(field);
    }
    fields.reverse();
    Ok(FieldSequence { fields, report })
}

/// HJB with `sigma` free of `z`; the control may enter `sigma`.
pub fn solve_case1(
    problem: &ControlProblem,
    grids: &GridPair,
    scheme: &FdScheme,
) -> Result<FieldSequence> {
    problem.require_scalar("finite-difference solver")?;
    if problem.sigma_depends_on_z {
        return Err(Error::input("first HJB form needs sigma independent of z"));
    }
    check_scheme(grids, scheme)?;
    march(
        problem,
        grids,
        scheme,
        |t, space, w, k| {
            let x = space.nodes()[k];
            let (p, m) = derivatives(w, k, space.step());
            let mut best = f64::NEG_INFINITY;
            let mut sigma2: f64 = 0.0;
            for &u in &problem.control_set {
                let (h, s2) = hamiltonian1(problem, t, x, w[k], p, m, u);
                best = best.max(h);
                sigma2 = sigma2.max(s2);
            }
            Ok(NodeUpdate {
                value: best,
                sigma2,
                clamped: false,
                algebraic_iterations: 0,
            })
        },
        |_| Ok(()),
    )
}

/// HJB coupled to `V = DW sigma(t, x, W, V)`; `V` and its residual are stored
/// as the companion of every slice.
pub fn solve_case2(
    problem: &ControlProblem,
    grids: &GridPair,
    scheme: &FdScheme,
    config: &AlgebraicConfig,
) -> Result<FieldSequence> {
    let companion =
        |t: f64, x: f64, w: f64, a: f64| companion_algebraic(problem, t, x, w, a, config);
    solve_case2_with(problem, grids, scheme, &companion)
}

/// [`solve_case2`] with a caller-supplied companion solver `(t, x, W, a) -> V`.
pub fn solve_case2_with(
    problem: &ControlProblem,
    grids: &GridPair,
    scheme: &FdScheme,
    companion: &CompanionFn<'_>,
) -> Result<FieldSequence> {
    problem.require_scalar("finite-difference solver")?;
    if problem.sigma_depends_on_u {
        return Err(Error::input(
            "algebraic HJB form needs sigma independent of the control",
        ));
    }
    check_scheme(grids, scheme)?;
    let node = |t: f64, space: &SpaceLattice, w: &[f64], k: usize| -> Result<NodeUpdate> {
        let x = space.nodes()[k];
        let (p, m) = derivatives(w, k, space.step());
        let a = p.max(0.0);
        let (v, iterations) = companion(t, x, w[k], a)?;
        let s = problem.diffusion1(t, x, w[k], v, 0.0);
        let mut best = f64::NEG_INFINITY;
        for &u in &problem.control_set {
            let h = p * problem.drift1(t, x, w[k], v, u)
                + 0.5 * s * s * m
                + problem.driver1(t, x, w[k], v, u);
            best = best.max(h);
        }
        Ok(NodeUpdate {
            value: best,
            sigma2: s * s,
            clamped: p < 0.0,
            algebraic_iterations: iterations.max(1),
        })
    };
    let finish = |field: &mut ValueField| -> Result<()> {
        let space = field.lattice.clone();
        let companion_values: Vec<(f64, f64)> = (0..space.len())
            .into_par_iter()
            .map(|k| {
                let x = space.nodes()[k];
                let w = field.values[k];
                let (p, _) = derivatives(&field.values, k, space.step());
                let a = p.max(0.0);
                let (v, _) = companion(field.time, x, w, a)?;
                let residual = (v - a * problem.diffusion1(field.time, x, w, v, 0.0)).abs();
                Ok((v, residual))
            })
            .collect::<Result<_>>()?;
        field.companion = Some(companion_values.iter().map(|c| c.0).collect());
        field.residual = Some(companion_values.iter().map(|c| c.1).collect());
        Ok(())
    };
    march(problem, grids, scheme, node, finish)
}

fn check_scheme(grids: &GridPair, scheme: &FdScheme) -> Result<()> {
    if (scheme.dx - grids.dx()).abs() > 1e-12 * grids.dx() {
        return Err(Error::Config(
            "scheme dx differs from the grid spacing".into(),
        ));
    }
    let covered = scheme.dt * scheme.substeps as f64;
    if scheme.substeps == 0 || (covered - grids.dt()).abs() > 1e-9 * grids.dt() {
        return Err(Error::Config(
            "scheme steps do not tile the grid time step".into(),
        ));
    }
    if scheme.cfl_number(scheme.sigma2_max) > scheme.theta / CFL_MARGIN * (1.0 + 1e-9) {
        return Err(Error::Cfl(format!(
            "planned CFL number {:.3} exceeds {:.3}",
            scheme.cfl_number(scheme.sigma2_max),
            scheme.theta / CFL_MARGIN
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{identity_terminal, ExprCoefficients};
    use std::sync::Arc;

    fn expr_problem(b: &str, s: &str, f: &str) -> ControlProblem {
        let c = ExprCoefficients::parse(b, s, f).unwrap();
        ControlProblem::builder(Arc::new(c), identity_terminal())
            .build()
            .unwrap()
    }

    #[test]
    fn hamiltonian_trivial_cases() {
        let p = expr_problem("0", "2.5", "0");
        assert_eq!(
            hamiltonian_case1(&p, 0.0, &[0.3], 7.0, &[1.0], &[0.0], 0.0).unwrap(),
            0.0
        );
        let p = expr_problem("x", "1", "x + y + z + u");
        let h = hamiltonian_case1(&p, 0.0, &[0.3], 0.5, &[0.0], &[0.0], 0.2).unwrap();
        assert!((h - (0.3 + 0.5 + 0.2)).abs() < 1e-15);
        assert!(hamiltonian_case1(&p, 0.0, &[0.3, 1.0], 0.5, &[0.0], &[0.0], 0.2).is_err());
    }

    #[test]
    fn hamiltonian_example_5_1_symbols() {
        let pr = ControlProblem::example_5_1();
        for &(x, w, p, m, u) in &[(0.3, -0.2, 1.1, 0.4, 0.5), (-1.5, 2.0, -0.7, -3.0, -1.0)] {
            let s = 4.0 * x - 5.0 * w + u;
            let want =
                p * (3.0 * x + 5.0 * p * s) + 0.5 * m * s * s + 2.0 * x + 3.0 * w + 4.0 * p * s + u;
            let h = hamiltonian_case1(&pr, 0.0, &[x], w, &[p], &[m], u).unwrap();
            assert!((h - want).abs() < 1e-12);
            assert_eq!(hamiltonian1(&pr, 0.0, x, w, p, m, u).0, h);
        }
    }

    #[test]
    fn linear_data_preserved_exactly() {
        let p = expr_problem("0", "1", "0");
        let grids = GridPair::build(0.25, 0.01, -2.0, 2.0, 0.05).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        let seq = solve_case1(&p, &grids, &scheme).unwrap();
        for f in &seq.fields {
            for (x, w) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((w - x).abs() < 1e-12);
            }
        }
        assert!(seq.report.max_cfl_number <= 0.45 + 1e-12);
    }

    #[test]
    fn degenerate_diffusion_with_linear_driver() {
        let p = expr_problem("0", "0", "u");
        let grids = GridPair::build(0.25, 0.01, -2.0, 2.0, 0.05).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        assert_eq!(scheme.substeps, 1);
        let seq = solve_case1(&p, &grids, &scheme).unwrap();
        for f in &seq.fields {
            for (x, w) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((w - (x + 0.25 - f.time)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scheme_must_match_grid() {
        let p = expr_problem("0", "1", "0");
        let grids = GridPair::build(0.25, 0.01, -2.0, 2.0, 0.05).unwrap();
        let mut scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        scheme.dt *= 4.0;
        assert!(solve_case1(&p, &grids, &scheme).is_err());
        assert!(FdScheme::plan(&p, &grids, 1.5).is_err());
    }

    #[test]
    fn growing_diffusion_trips_cfl_guard() {
        // sigma grows with W, which grows linearly in time under f = 40
        let p = expr_problem("0", "1 + y", "40");
        let p = p.with_terminal(Arc::new(|_: &[f64]| 0.0));
        let grids = GridPair::build(1.0, 0.05, -1.0, 1.0, 0.1).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 1.0).unwrap();
        let r = solve_case1(&p, &grids, &scheme);
        assert!(matches!(r, Err(Error::Cfl(_))), "{r:?}");
    }

    #[test]
    fn case2_terminal_slice_and_closed_form_companion() {
        let l = 0.05;
        let p = ControlProblem::example_5_2(l).unwrap();
        let grids = GridPair::build(0.05, 1e-3, -2.0, 2.0, 0.05).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        let seq = solve_case2(&p, &grids, &scheme, &AlgebraicConfig::default()).unwrap();
        let last = seq.last();
        for (x, w) in last.lattice.nodes().iter().zip(&last.values) {
            assert_eq!(w, x);
        }
        for f in &seq.fields {
            let v = f.companion.as_ref().unwrap();
            let r = f.residual.as_ref().unwrap();
            for k in 0..f.lattice.len() {
                let (dw, _) = derivatives(&f.values, k, f.lattice.step());
                let a = dw.max(0.0);
                let x = f.lattice.nodes()[k];
                assert!(r[k] <= 1e-10);
                assert!((v[k] + a * x / (1.0 + a * l)).abs() <= 1e-8);
            }
        }
        assert_eq!(seq.report.clamped_nodes, 0);
    }

    #[test]
    fn case2_without_z_coupling_matches_explicit_companion() {
        let p = ControlProblem::example_5_2(0.0).unwrap();
        let grids = GridPair::build(0.05, 1e-3, -2.0, 2.0, 0.05).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        let a = solve_case2(&p, &grids, &scheme, &AlgebraicConfig::default()).unwrap();
        let explicit = |_: f64, x: f64, _: f64, a: f64| Ok((-a * x, 0));
        let b = solve_case2_with(&p, &grids, &scheme, &explicit).unwrap();
        for (fa, fb) in a.fields.iter().zip(&b.fields) {
            for (u, v) in fa.values.iter().zip(&fb.values) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn case1_rejects_z_dependent_sigma() {
        let p = ControlProblem::example_5_2(0.05).unwrap();
        let grids = GridPair::build(0.05, 1e-3, -2.0, 2.0, 0.05).unwrap();
        let scheme = FdScheme::plan(&p, &grids, 0.9).unwrap();
        assert!(solve_case1(&p, &grids, &scheme).is_err());
        let q = ControlProblem::example_5_1();
        assert!(solve_case2(
            &q,
            &grids,
            &FdScheme::plan(&q, &grids, 0.9).unwrap(),
            &AlgebraicConfig::default()
        )
        .is_err());
    }
}
