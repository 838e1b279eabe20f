//! Backward dynamic programming for the value function `W(t, x)`.
//!
//! Each step of length `delta` maximizes the backward semigroup applied to the
//! interpolant of `W(t_{i+1}, .)` over the finite control set, one control per
//! node and step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{
    backward_slice, one_step_solve, record, semigroup_apply_reported, solve_fixed_control,
    Feedback, NoiseLattice, OneStepOptions,
};
use crate::field::{FieldSequence, ValueField};
use crate::grid::{GridPair, SpaceLattice};
use crate::model::{contraction_step_bound, ControlProblem};
use crate::report::SolveReport;

/// Argmax control index per node and time slice `i = 0..N-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyField {
    pub times: Vec<f64>,
    pub lattice: Arc<SpaceLattice>,
    pub controls: Vec<f64>,
    /// `indices[i][k]` is the control used on `[t_i, t_{i+1})` at node `k`.
    pub indices: Vec<Vec<usize>>,
}

impl PolicyField {
    pub fn control_at(&self, slice: usize, node: usize) -> f64 {
        self.controls[self.indices[slice][node]]
    }

    /// The same control index everywhere.
    pub fn constant(grids: &GridPair, controls: Vec<f64>, index: usize) -> Result<Self> {
        if index >= controls.len() {
            return Err(Error::input(format!("control index {index} out of range")));
        }
        let steps = grids.time.steps();
        Ok(Self {
            times: grids.time.times()[..steps].to_vec(),
            lattice: grids.space.clone(),
            controls,
            indices: vec![vec![index; grids.space.len()]; steps],
        })
    }

    /// `(t, x, u)` rows.
    pub fn triples(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for (i, t) in self.times.iter().enumerate() {
            for (k, x) in self.lattice.nodes().iter().enumerate() {
                out.push((*t, *x, self.control_at(i, k)));
            }
        }
        out
    }

    fn check_shape(&self, grids: &GridPair) -> Result<()> {
        let steps = grids.time.steps();
        if self.indices.len() != steps || self.indices.iter().any(|r| r.len() != grids.space.len())
        {
            return Err(Error::input("policy shape does not match the grids"));
        }
        if self
            .indices
            .iter()
            .flatten()
            .any(|&j| j >= self.controls.len())
        {
            return Err(Error::input("policy index out of range"));
        }
        Ok(())
    }
}

impl Feedback for PolicyField {
    fn control(&self, slice: usize, _t: f64, x: f64) -> f64 {
        self.control_at(slice, self.lattice.nearest(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DppConfig {
    pub one_step: OneStepOptions,
    /// Subintervals per DPP step inside the semigroup.
    pub substeps: usize,
    /// Probe the contraction step before solving and refuse larger grid steps.
    pub check_step: bool,
}

impl Default for DppConfig {
    fn default() -> Self {
        Self {
            one_step: OneStepOptions::default(),
            substeps: 1,
            check_step: true,
        }
    }
}

/// Probe point of the contraction check: three quarters across the box, away
/// from the center where linear data can leave the coupling unexcited.
pub fn probe_point(lattice: &SpaceLattice) -> f64 {
    lattice.lo() + 0.75 * (lattice.hi() - lattice.lo())
}

/// Refuses a grid step larger than the admissible contraction step.
pub fn check_time_step(problem: &ControlProblem, grids: &GridPair) -> Result<f64> {
    let dt = grids.dt();
    let phi = problem.terminal().clone();
    let delta0 = contraction_step_bound(problem, &*phi, &[probe_point(&grids.space)], dt)?;
    if delta0 < dt {
        return Err(Error::StepTooLarge { delta: dt, delta0 });
    }
    Ok(delta0)
}

/// `W(t_i, .)` for every slice, with the maximizing controls.
pub fn value_function_dpp(
    problem: &ControlProblem,
    grids: &GridPair,
    lattice: &NoiseLattice,
    config: &DppConfig,
) -> Result<(FieldSequence, PolicyField)> {
    problem.require_scalar("dynamic programming")?;
    if problem.control_set.is_empty() {
        return Err(Error::input("control set is empty"));
    }
    if config.substeps == 0 {
        return Err(Error::input("substeps must be positive"));
    }
    if config.check_step {
        check_time_step(problem, grids)?;
    }
    let space = &grids.space;
    let steps = grids.time.steps();
    let dt = grids.dt();
    let opts = &config.one_step;
    let terminal: Vec<f64> = space
        .nodes()
        .iter()
        .map(|x| problem.terminal_value(&[*x]))
        .collect();
    let mut fields = vec![ValueField::new(
        steps,
        grids.time.time(steps),
        space.clone(),
        terminal,
    )];
    let mut indices = vec![Vec::new(); steps];
    let mut report = SolveReport::default();
    for i in (0..steps).rev() {
        let t = grids.time.time(i);
        let next = fields.last().expect("terminal slice");
        let interp = next.interpolant();
        let psi = move |p: &[f64]| interp.eval(p[0]);
        let slice = std::sync::Mutex::new(vec![0usize; space.len()]);
        let (values, slice_report) = backward_slice(space, |k, x| {
            let mut r = SolveReport::default();
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (j, &u) in problem.control_set.iter().enumerate() {
                let y = if config.substeps == 1 {
                    let sol = one_step_solve(problem, t, &[x], dt, u, &psi, lattice, opts)?;
                    record(&mut r, &sol, space);
                    sol.y
                } else {
                    semigroup_apply_reported(
                        problem,
                        t,
                        &[x],
                        dt,
                        u,
                        &psi,
                        config.substeps,
                        lattice,
                        opts,
                        &mut r,
                    )?
                };
                // strict comparison keeps the lowest index on ties
                if y > best {
                    best = y;
                    arg = j;
                }
            }
            slice.lock().expect("policy slice")[k] = arg;
            Ok((best, r))
        })?;
        indices[i] = slice.into_inner().expect("policy slice");
        report.merge(&slice_report);
        let mut field = ValueField::new(i, t, space.clone(), values);
        field.report = slice_report;
        fields.push(field);
    }
    fields.reverse();
    let policy = PolicyField {
        times: grids.time.times()[..steps].to_vec(),
        lattice: space.clone(),
        controls: problem.control_set.clone(),
        indices,
    };
    Ok((FieldSequence { fields, report }, policy))
}

/// Cost-functional fields of a frozen policy.
pub fn evaluate_policy(
    problem: &ControlProblem,
    policy: &PolicyField,
    grids: &GridPair,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<FieldSequence> {
    policy.check_shape(grids)?;
    let phi = problem.terminal().clone();
    solve_fixed_control(problem, policy, grids, &*phi, lattice, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbsde::ConstantControl;
    use crate::model::{identity_terminal, ExprCoefficients};

    fn expr_problem(b: &str, s: &str, f: &str) -> ControlProblem {
        let c = ExprCoefficients::parse(b, s, f).unwrap();
        ControlProblem::builder(Arc::new(c), identity_terminal())
            .monotonicity(0.0, 0.0, 1.0)
            .build()
            .unwrap()
    }

    fn small_grids() -> GridPair {
        GridPair::build(0.1, 0.01, -1.0, 1.0, 0.05).unwrap()
    }

    fn unchecked() -> DppConfig {
        DppConfig {
            check_step: false,
            ..Default::default()
        }
    }

    #[test]
    fn zero_coefficients_keep_terminal() {
        let p = expr_problem("0", "0", "0").with_terminal(Arc::new(|x: &[f64]| x[0] * x[0]));
        let grids = small_grids();
        let (seq, _) = value_function_dpp(
            &p,
            &grids,
            &NoiseLattice::trinomial(1),
            &DppConfig::default(),
        )
        .unwrap();
        for f in &seq.fields {
            for (x, w) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((w - x * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_driver_in_control() {
        let p = expr_problem("0", "1", "u");
        let grids = GridPair::build(0.25, 0.01, -2.0, 2.0, 0.05).unwrap();
        let (seq, policy) =
            value_function_dpp(&p, &grids, &NoiseLattice::trinomial(1), &unchecked()).unwrap();
        for f in &seq.fields {
            for (x, w) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((w - (x + 0.25 - f.time)).abs() < 1e-9, "t={} x={x}", f.time);
            }
        }
        assert!(policy
            .indices
            .iter()
            .flatten()
            .all(|&j| p.control_set[j] == 1.0));
    }

    #[test]
    fn example_5_1_terminal_slice() {
        let p = ControlProblem::example_5_1();
        let grids = GridPair::build(0.02, 1e-3, -1.0, 1.0, 0.05).unwrap();
        let (seq, _) = value_function_dpp(
            &p,
            &grids,
            &NoiseLattice::trinomial(1),
            &DppConfig::default(),
        )
        .unwrap();
        let last = seq.last();
        assert_eq!(last.time, 0.02);
        for (x, w) in last.lattice.nodes().iter().zip(&last.values) {
            assert_eq!(w, x);
        }
        assert!(seq.report.max_contraction_ratio <= 0.5);
    }

    #[test]
    fn oversized_step_is_refused() {
        let p = ControlProblem::example_5_1();
        let grids = GridPair::build(0.5, 0.5, -1.0, 1.0, 0.05).unwrap();
        let r = value_function_dpp(
            &p,
            &grids,
            &NoiseLattice::trinomial(1),
            &DppConfig::default(),
        );
        assert!(matches!(r, Err(Error::StepTooLarge { .. })), "{r:?}");
    }

    #[test]
    fn dominance_over_every_control() {
        let p = ControlProblem::example_5_1();
        let grids = GridPair::build(0.01, 1e-3, -1.0, 1.0, 0.1).unwrap();
        let lat = NoiseLattice::trinomial(1);
        let opts = OneStepOptions::default();
        let (seq, _) = value_function_dpp(&p, &grids, &lat, &DppConfig::default()).unwrap();
        for i in 0..grids.time.steps() {
            let next = &seq.fields[i + 1];
            let psi = |x: &[f64]| next.eval(x[0]);
            for (k, &x) in grids.space.nodes().iter().enumerate() {
                for &u in &p.control_set {
                    let g = crate::fbsde::semigroup_apply(
                        &p,
                        seq.fields[i].time,
                        &[x],
                        grids.dt(),
                        u,
                        &psi,
                        1,
                        &lat,
                        &opts,
                    )
                    .unwrap();
                    assert!(g <= seq.fields[i].values[k] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn policy_sandwich_and_constant_policies() {
        let p = ControlProblem::example_5_1();
        let grids = GridPair::build(0.05, 1e-3, -1.0, 1.0, 0.05).unwrap();
        let lat = NoiseLattice::trinomial(1);
        let opts = OneStepOptions::default();
        let (w, policy) = value_function_dpp(&p, &grids, &lat, &DppConfig::default()).unwrap();
        let j = evaluate_policy(&p, &policy, &grids, &lat, &opts).unwrap();
        for (fw, fj) in w.fields.iter().zip(&j.fields) {
            for (a, b) in fw.values.iter().zip(&fj.values) {
                assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            }
        }
        for idx in [0, 10, 20] {
            let c = PolicyField::constant(&grids, p.control_set.clone(), idx).unwrap();
            let j = evaluate_policy(&p, &c, &grids, &lat, &opts).unwrap();
            let direct = solve_fixed_control(
                &p,
                &ConstantControl(p.control_set[idx]),
                &grids,
                &*p.terminal().clone(),
                &lat,
                &opts,
            )
            .unwrap();
            for ((fw, fj), fd) in w.fields.iter().zip(&j.fields).zip(&direct.fields) {
                for ((a, b), c) in fw.values.iter().zip(&fj.values).zip(&fd.values) {
                    assert!(*b <= a + 1e-8);
                    assert_eq!(b, c);
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_every_policy_returns_terminal() {
        let p = expr_problem("0", "0", "0");
        let grids = small_grids();
        let c = PolicyField::constant(&grids, p.control_set.clone(), 3).unwrap();
        let j = evaluate_policy(
            &p,
            &c,
            &grids,
            &NoiseLattice::trinomial(1),
            &OneStepOptions::default(),
        )
        .unwrap();
        for f in &j.fields {
            for (x, v) in f.lattice.nodes().iter().zip(&f.values) {
                assert!((v - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_shape_is_checked() {
        let p = expr_problem("0", "0", "0");
        let grids = small_grids();
        let other = GridPair::build(0.1, 0.02, -1.0, 1.0, 0.05).unwrap();
        let c = PolicyField::constant(&other, p.control_set.clone(), 0).unwrap();
        assert!(evaluate_policy(
            &p,
            &c,
            &grids,
            &NoiseLattice::trinomial(1),
            &OneStepOptions::default()
        )
        .is_err());
    }
}
