//! Pass/fail checks of structural properties of computed value fields.
//!
//! Each check returns a [`CheckOutcome`] with the measured quantity, the
//! threshold it is held to and the location attaining it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::algebraic::AlgebraicConfig;
use crate::control::{value_function_dpp, DppConfig};
use crate::error::{Error, Result};
use crate::fbsde::{
    one_step_solve, solve_fixed_control, ConstantControl, Feedback, NoiseLattice, OneStepOptions,
};
use crate::field::FieldSequence;
use crate::grid::GridPair;
use crate::hjb::{solve_case1, solve_case2, FdScheme};
use crate::model::{ControlProblem, Terminal};

/// Absolute slack of ordering checks.
pub const ORDER_TOLERANCE: f64 = 1e-8;
/// Floor of the discrete monotonicity check.
pub const MONOTONICITY_FLOOR: f64 = -1e-6;
/// Allowed relative drift of a fitted constant across one refinement.
pub const DRIFT_TOLERANCE: f64 = 0.2;
/// Default bound on the interior discrepancy between the two pipelines.
pub const CROSS_VALIDATION_BUDGET: f64 = 0.05;
/// Fraction of the box compared by [`cross_validate`].
pub const INTERIOR_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub slice: usize,
    pub t: f64,
    pub x: f64,
    pub control: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub id: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub witness: Option<Location>,
    /// Auxiliary measurements (fitted constants, gaps, counts).
    pub metrics: BTreeMap<String, f64>,
}

impl CheckOutcome {
    fn upper(id: &str, measured: f64, threshold: f64, witness: Option<Location>) -> Self {
        Self {
            id: id.to_string(),
            passed: measured <= threshold,
            measured,
            threshold,
            witness,
            metrics: BTreeMap::new(),
        }
    }

    fn lower(id: &str, measured: f64, threshold: f64, witness: Option<Location>) -> Self {
        Self {
            id: id.to_string(),
            passed: measured >= threshold,
            measured,
            threshold,
            witness,
            metrics: BTreeMap::new(),
        }
    }

    fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.to_string(), value);
        self
    }
}

/// Deepest excursion of `a - b` below zero, tracked with its location.
struct OrderScan {
    min: f64,
    max: f64,
    /// Largest gap before the terminal slice.
    max_interior: f64,
    at: Option<Location>,
}

impl OrderScan {
    fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            max_interior: f64::NEG_INFINITY,
            at: None,
        }
    }

    fn scan(&mut self, a: &FieldSequence, b: &FieldSequence, control: Option<f64>) {
        let last = a.len() - 1;
        for (i, (fa, fb)) in a.fields.iter().zip(&b.fields).enumerate() {
            for (k, (va, vb)) in fa.values.iter().zip(&fb.values).enumerate() {
                let gap = va - vb;
                self.max = self.max.max(gap);
                if i < last {
                    self.max_interior = self.max_interior.max(gap);
                }
                if gap < self.min {
                    self.min = gap;
                    self.at = Some(Location {
                        slice: fa.index,
                        t: fa.time,
                        x: fa.lattice.nodes()[k],
                        control,
                    });
                }
            }
        }
    }
}

/// Ordered terminal data must give ordered values, for the optimal value and
/// for every constant control.
///
/// `metrics` carries `epsilon = sup (phi1 - phi2)`, the largest gap, the largest
/// gap before the terminal slice and the fitted `C = max interior gap / epsilon`.
pub fn check_comparison(
    problem: &ControlProblem,
    phi1: &Terminal,
    phi2: &Terminal,
    grids: &GridPair,
    lattice: &NoiseLattice,
    config: &DppConfig,
) -> Result<CheckOutcome> {
    let mut epsilon: f64 = 0.0;
    for &x in grids.space.nodes() {
        let d = phi1(&[x]) - phi2(&[x]);
        if d < 0.0 {
            return Err(Error::input(format!(
                "terminal data not ordered at x = {x}: phi1 - phi2 = {d}"
            )));
        }
        epsilon = epsilon.max(d);
    }
    let p1 = problem.with_terminal(phi1.clone());
    let p2 = problem.with_terminal(phi2.clone());
    let mut scan = OrderScan::new();
    let (w1, _) = value_function_dpp(&p1, grids, lattice, config)?;
    let (w2, _) = value_function_dpp(&p2, grids, lattice, config)?;
    scan.scan(&w1, &w2, None);
    for &u in &problem.control_set {
        let j1 = solve_fixed_control(
            &p1,
            &ConstantControl(u),
            grids,
            &**phi1,
            lattice,
            &config.one_step,
        )?;
        let j2 = solve_fixed_control(
            &p2,
            &ConstantControl(u),
            grids,
            &**phi2,
            lattice,
            &config.one_step,
        )?;
        scan.scan(&j1, &j2, Some(u));
    }
    let fitted = if epsilon > 0.0 {
        scan.max_interior.max(0.0) / epsilon
    } else {
        0.0
    };
    Ok(
        CheckOutcome::lower("comparison", scan.min, -ORDER_TOLERANCE, scan.at)
            .metric("epsilon", epsilon)
            .metric("max_gap", scan.max)
            .metric("max_interior_gap", scan.max_interior)
            .metric("fitted_c", fitted),
    )
}

/// Constants fitted by [`check_regularity`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    /// `max |W(t, x') - W(t, x)| / |x' - x|` over neighbouring nodes.
    pub lipschitz: f64,
    /// `max |W(t, x)| / (1 + |x|)`.
    pub growth: f64,
    /// Smallest forward difference `W(t, x_{k+1}) - W(t, x_k)`.
    pub min_increment: f64,
    /// `max |W(t_i, x) - W(t_j, x)| / ((1 + |x|) sqrt|t_i - t_j|)` over all slice pairs.
    pub time: f64,
}

/// Fits the four regularity constants of a field sequence.
pub fn regularity_constants(
    fields: &FieldSequence,
) -> Result<(RegularityConstants, [Option<Location>; 4])> {
    if fields.len() < 2 || fields.first().lattice.len() < 3 {
        return Err(Error::input(
            "regularity checks need at least 2 slices and 3 nodes",
        ));
    }
    let mut c = RegularityConstants {
        lipschitz: 0.0,
        growth: 0.0,
        min_increment: f64::INFINITY,
        time: 0.0,
    };
    let mut at: [Option<Location>; 4] = Default::default();
    let loc = |i: usize, k: usize| {
        let f = &fields.fields[i];
        Some(Location {
            slice: f.index,
            t: f.time,
            x: f.lattice.nodes()[k],
            control: None,
        })
    };
    for (i, f) in fields.fields.iter().enumerate() {
        let nodes = f.lattice.nodes();
        for k in 0..nodes.len() {
            let g = f.values[k].abs() / (1.0 + nodes[k].abs());
            if g > c.growth {
                c.growth = g;
                at[1] = loc(i, k);
            }
            if k + 1 < nodes.len() {
                let dw = f.values[k + 1] - f.values[k];
                let r = dw.abs() / (nodes[k + 1] - nodes[k]);
                if r > c.lipschitz {
                    c.lipschitz = r;
                    at[0] = loc(i, k);
                }
                if dw < c.min_increment {
                    c.min_increment = dw;
                    at[2] = loc(i, k);
                }
            }
        }
    }
    for i in 0..fields.len() {
        for j in i + 1..fields.len() {
            let (a, b) = (&fields.fields[i], &fields.fields[j]);
            let dt = (b.time - a.time).abs().sqrt();
            for (k, x) in a.lattice.nodes().iter().enumerate() {
                let r = (a.values[k] - b.values[k]).abs() / ((1.0 + x.abs()) * dt);
                if r > c.time {
                    c.time = r;
                    at[3] = loc(i, k);
                }
            }
        }
    }
    Ok((c, at))
}

/// Lipschitz, growth, monotonicity and time-increment checks of one run.
pub fn check_regularity(fields: &FieldSequence) -> Result<Vec<CheckOutcome>> {
    let (c, at) = regularity_constants(fields)?;
    let [lip, growth, mono, time] = at;
    Ok(vec![
        CheckOutcome::upper("lipschitz", c.lipschitz, f64::MAX, lip),
        CheckOutcome::upper("growth", c.growth, f64::MAX, growth),
        CheckOutcome::lower("monotonicity", c.min_increment, MONOTONICITY_FLOOR, mono),
        CheckOutcome::upper("time_increment", c.time, f64::MAX, time),
    ])
}

/// Relative change `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn relative_drift(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale <= 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Stability of the fitted regularity constants between a run and its refinement.
pub fn check_regularity_drift(
    coarse: &FieldSequence,
    fine: &FieldSequence,
) -> Result<Vec<CheckOutcome>> {
    let (a, _) = regularity_constants(coarse)?;
    let (b, _) = regularity_constants(fine)?;
    let pairs = [
        ("lipschitz_drift", a.lipschitz, b.lipschitz),
        ("growth_drift", a.growth, b.growth),
        ("time_increment_drift", a.time, b.time),
    ];
    Ok(pairs
        .iter()
        .map(|(id, x, y)| {
            CheckOutcome::upper(id, relative_drift(*x, *y), DRIFT_TOLERANCE, None)
                .metric("coarse", *x)
                .metric("fine", *y)
        })
        .collect())
}

/// Outputs of [`cross_validate`].
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub outcome: CheckOutcome,
    pub dpp: FieldSequence,
    pub hjb: FieldSequence,
}

/// Settings of the two pipelines compared by [`cross_validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationConfig {
    pub dpp: DppConfig,
    pub theta: f64,
    pub algebraic: AlgebraicConfig,
    pub budget: f64,
}

impl Default for CrossValidationConfig {
    fn default() -> Self {
        Self {
            dpp: DppConfig::default(),
            theta: 0.9,
            algebraic: AlgebraicConfig::default(),
            budget: CROSS_VALIDATION_BUDGET,
        }
    }
}

/// Runs the HJB solver matching the problem's `sigma` dependence.
pub fn solve_hjb(
    problem: &ControlProblem,
    grids: &GridPair,
    theta: f64,
    algebraic: &AlgebraicConfig,
) -> Result<FieldSequence> {
    let scheme = FdScheme::plan(problem, grids, theta)?;
    if problem.sigma_depends_on_z {
        solve_case2(problem, grids, &scheme, algebraic)
    } else {
        solve_case1(problem, grids, &scheme)
    }
}

/// Largest interior discrepancy between two runs, on the inner part of the
/// box and away from the last two slices.
///
/// Slices are matched by time, values of `b` interpolated at the nodes of `a`.
pub fn interior_discrepancy(a: &FieldSequence, b: &FieldSequence) -> (f64, Option<Location>) {
    let lattice = &a.first().lattice;
    let center = 0.5 * (lattice.lo() + lattice.hi());
    let half = 0.5 * INTERIOR_FRACTION * (lattice.hi() - lattice.lo());
    let mut worst = 0.0;
    let mut at = None;
    let keep = a.len().saturating_sub(2);
    for fa in &a.fields[..keep] {
        let Some(fb) = b
            .fields
            .iter()
            .find(|f| (f.time - fa.time).abs() <= 1e-9 * (1.0 + fa.time))
        else {
            continue;
        };
        for (k, &x) in fa.lattice.nodes().iter().enumerate() {
            if (x - center).abs() > half * (1.0 + 1e-12) {
                continue;
            }
            let d = (fa.values[k] - fb.eval(x)).abs();
            if d > worst {
                worst = d;
                at = Some(Location {
                    slice: fa.index,
                    t: fa.time,
                    x,
                    control: None,
                });
            }
        }
    }
    (worst, at)
}

/// Agreement of the dynamic-programming value with the HJB solution.
pub fn cross_validate(
    problem: &ControlProblem,
    grids_dpp: &GridPair,
    grids_pde: &GridPair,
    lattice: &NoiseLattice,
    config: &CrossValidationConfig,
) -> Result<CrossValidation> {
    let (a, b) = (&grids_dpp.space, &grids_pde.space);
    if (a.lo() - b.lo()).abs() > 1e-12 || (a.hi() - b.hi()).abs() > 1e-12 {
        return Err(Error::Config(
            "both pipelines must use the same truncation box".into(),
        ));
    }
    let (dpp, _) = value_function_dpp(problem, grids_dpp, lattice, &config.dpp)?;
    let hjb = solve_hjb(problem, grids_pde, config.theta, &config.algebraic)?;
    let outcome = pipeline_agreement(&dpp, &hjb, config.budget);
    Ok(CrossValidation { outcome, dpp, hjb })
}

/// Interior agreement of two already computed pipeline outputs.
pub fn pipeline_agreement(dpp: &FieldSequence, hjb: &FieldSequence, budget: f64) -> CheckOutcome {
    let (worst, at) = interior_discrepancy(dpp, hjb);
    CheckOutcome::upper("cross_validation", worst, budget, at)
        .metric("clamp_fraction", hjb.report.clamp_fraction())
        .metric("max_algebraic_residual", hjb.report.max_algebraic_residual)
        .metric("max_contraction_ratio", dpp.report.max_contraction_ratio)
}

/// One backward step from every slice of a fixed-policy run must reproduce the
/// slice before it, at the nodes and at the cell midpoints.
///
/// The budget is the midpoint interpolation bound `Lip dx / 2` of the run
/// (plus the fixed-point slack), reported as the threshold.
pub fn check_flow_consistency(
    problem: &ControlProblem,
    policy: &dyn Feedback,
    grids: &GridPair,
    lattice: &NoiseLattice,
    opts: &OneStepOptions,
) -> Result<CheckOutcome> {
    let phi = problem.terminal().clone();
    let run = solve_fixed_control(problem, policy, grids, &*phi, lattice, opts)?;
    let (c, _) = regularity_constants(&run)?;
    let dx = grids.dx();
    let budget = 0.5 * c.lipschitz * dx + ORDER_TOLERANCE;
    let dt = grids.dt();
    let mut worst: f64 = 0.0;
    let mut at = None;
    for i in 0..grids.time.steps() {
        let earlier = &run.fields[i];
        let later = &run.fields[i + 1];
        let psi = |x: &[f64]| later.eval(x[0]);
        let nodes = grids.space.nodes();
        let points = nodes
            .iter()
            .copied()
            .chain(nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        for x in points {
            let u = policy.control(i, earlier.time, x);
            let y = one_step_solve(problem, earlier.time, &[x], dt, u, &psi, lattice, opts)?.y;
            let d = (y - earlier.eval(x)).abs();
            if d > worst {
                worst = d;
                at = Some(Location {
                    slice: i,
                    t: earlier.time,
                    x,
                    control: Some(u),
                });
            }
        }
    }
    Ok(CheckOutcome::upper("flow_consistency", worst, budget, at)
        .metric("lipschitz", c.lipschitz)
        .metric("dx", dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ValueField;
    use crate::grid::SpaceLattice;
    use crate::model::{identity_terminal, ExprCoefficients};
    use crate::report::SolveReport;
    use std::sync::Arc;

    fn sequence(f: impl Fn(f64, f64) -> f64) -> FieldSequence {
        let l = Arc::new(SpaceLattice::uniform(-1.0, 1.0, 0.1).unwrap());
        let fields = (0..5)
            .map(|i| {
                let t = i as f64 * 0.1;
                let v = l.nodes().iter().map(|x| f(t, *x)).collect();
                ValueField::new(i, t, l.clone(), v)
            })
            .collect();
        FieldSequence {
            fields,
            report: SolveReport::default(),
        }
    }

    fn zero_problem() -> ControlProblem {
        let c = ExprCoefficients::parse("0", "0", "0").unwrap();
        ControlProblem::builder(Arc::new(c), identity_terminal())
            .build()
            .unwrap()
    }

    #[test]
    fn constant_field_is_regular() {
        let out = check_regularity(&sequence(|_, _| 2.0)).unwrap();
        assert!(out.iter().all(|o| o.passed));
        assert_eq!(out[0].measured, 0.0);
        assert_eq!(out[2].measured, 0.0);
        assert_eq!(out[3].measured, 0.0);
    }

    #[test]
    fn identity_field_has_unit_slope() {
        let out = check_regularity(&sequence(|_, x| x)).unwrap();
        assert!(out.iter().all(|o| o.passed));
        assert!((out[0].measured - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decreasing_field_fails_monotonicity() {
        let out = check_regularity(&sequence(|_, x| -x)).unwrap();
        assert!(!out[2].passed);
        assert!(out[2].witness.is_some());
    }

    #[test]
    fn drift_of_identical_runs_is_zero() {
        let s = sequence(|t, x| x + t.sqrt());
        assert!(check_regularity_drift(&s, &s)
            .unwrap()
            .iter()
            .all(|o| o.passed && o.measured == 0.0));
    }

    #[test]
    fn comparison_equal_terminals() {
        let p = zero_problem();
        let grids = GridPair::build(0.05, 0.01, -1.0, 1.0, 0.1).unwrap();
        let phi = identity_terminal();
        let o = check_comparison(
            &p,
            &phi,
            &phi,
            &grids,
            &NoiseLattice::trinomial(1),
            &DppConfig::default(),
        )
        .unwrap();
        assert!(o.passed);
        assert_eq!(o.measured, 0.0);
        assert_eq!(o.metrics["max_gap"], 0.0);
    }

    #[test]
    fn comparison_rejects_unordered_terminals() {
        let p = zero_problem();
        let grids = GridPair::build(0.05, 0.01, -1.0, 1.0, 0.1).unwrap();
        let phi1 = identity_terminal();
        let phi2: Terminal = Arc::new(|x: &[f64]| x[0] + 0.1);
        assert!(matches!(
            check_comparison(
                &p,
                &phi1,
                &phi2,
                &grids,
                &NoiseLattice::trinomial(1),
                &DppConfig::default()
            ),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cross_validation_zero_problem() {
        let p = zero_problem();
        let grids = GridPair::build(0.05, 0.01, -1.0, 1.0, 0.1).unwrap();
        let cfg = CrossValidationConfig::default();
        let r = cross_validate(&p, &grids, &grids, &NoiseLattice::trinomial(1), &cfg).unwrap();
        assert!(r.outcome.passed);
        assert!(r.outcome.measured <= 1e-12);
    }

    #[test]
    fn flow_consistency_zero_problem_is_exact() {
        let p = zero_problem();
        let grids = GridPair::build(0.05, 0.01, -1.0, 1.0, 0.1).unwrap();
        let o = check_flow_consistency(
            &p,
            &ConstantControl(0.0),
            &grids,
            &NoiseLattice::trinomial(1),
            &OneStepOptions::default(),
        )
        .unwrap();
        assert!(o.passed);
        assert!(o.measured <= 1e-12);
    }
}
