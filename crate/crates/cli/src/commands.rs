//! Subcommand implementations.

use std::sync::Arc;

use fbsde_core::algebraic::AlgebraicConfig;
use fbsde_core::control::{probe_point, value_function_dpp, DppConfig, PolicyField};
use fbsde_core::model::{
    contraction_step_bound, validate_lipschitz, validate_monotonicity, Terminal,
    VIOLATION_TOLERANCE,
};
use fbsde_core::verify::{
    check_comparison, check_flow_consistency, check_regularity, check_regularity_drift,
    pipeline_agreement, solve_hjb, CheckOutcome,
};
use fbsde_core::{
    ControlProblem, Error, FieldSequence, GridPair, NoiseLattice, OneStepOptions, SamplerConfig,
    SolveReport, ValidationReport,
};
use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::{OutputDir, StepInfo};
use crate::CliError;

/// Process exit status of a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    CheckFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Pipeline {
    Dpp,
    Hjb,
    Both,
}

pub struct Context {
    pub config: RunConfig,
    pub problem: ControlProblem,
    pub out: OutputDir,
}

impl Context {
    fn lattice(&self) -> NoiseLattice {
        self.config.noise_lattice()
    }

    fn one_step(&self) -> OneStepOptions {
        OneStepOptions {
            tolerance: self.config.tolerance,
            max_iter: self.config.max_iter,
        }
    }

    fn dpp_config(&self) -> DppConfig {
        DppConfig {
            one_step: self.one_step(),
            ..DppConfig::default()
        }
    }

    fn algebraic(&self) -> AlgebraicConfig {
        AlgebraicConfig {
            tolerance: self.config.algebraic_tolerance,
            max_iter: self.config.algebraic_max_iter,
            ..AlgebraicConfig::default()
        }
    }

    fn grids(&self, delta: f64, dx: f64) -> Result<GridPair, CliError> {
        let c = &self.config;
        Ok(GridPair::build(
            c.horizon,
            delta,
            c.space_box[0],
            c.space_box[1],
            dx,
        )?)
    }

    /// Grids of the dynamic-programming pipeline, with the step checked
    /// against the contraction probe (and shrunk when `auto_delta` is set).
    fn dpp_grids(&mut self) -> Result<GridPair, CliError> {
        let requested = self.config.delta;
        let grids = self.grids(requested, self.config.dx)?;
        let phi = self.problem.terminal().clone();
        let delta0 = contraction_step_bound(
            &self.problem,
            &*phi,
            &[probe_point(&grids.space)],
            grids.dt(),
        )?;
        let grids = if delta0 < grids.dt() {
            if !self.config.auto_delta {
                return Err(Error::StepTooLarge {
                    delta: grids.dt(),
                    delta0,
                }
                .into());
            }
            warn!(
                "time step {:e} shrunk to the admissible contraction step {delta0:e}",
                grids.dt()
            );
            self.grids(delta0, self.config.dx)?
        } else {
            grids
        };
        self.out.provenance.step = Some(StepInfo {
            requested,
            delta: grids.dt(),
            delta0: Some(delta0),
            steps: grids.time.steps(),
        });
        Ok(grids)
    }

    fn pde_grids(&mut self) -> Result<GridPair, CliError> {
        let grids = self.grids(self.config.delta, self.config.dx)?;
        if self.out.provenance.step.is_none() {
            self.out.provenance.step = Some(StepInfo {
                requested: self.config.delta,
                delta: grids.dt(),
                delta0: None,
                steps: grids.time.steps(),
            });
        }
        Ok(grids)
    }

    fn dpp(&self, grids: &GridPair) -> Result<(FieldSequence, PolicyField), CliError> {
        let (fields, policy) =
            value_function_dpp(&self.problem, grids, &self.lattice(), &self.dpp_config())?;
        info!(
            "dpp: {} one-step solves, max ratio {:.3}",
            fields.report.one_step_solves, fields.report.max_contraction_ratio
        );
        Ok((fields, policy))
    }

    fn hjb(&self, grids: &GridPair) -> Result<FieldSequence, CliError> {
        let fields = solve_hjb(&self.problem, grids, self.config.theta, &self.algebraic())?;
        info!(
            "hjb: {} steps, max CFL number {:.3}",
            fields.report.pde_steps, fields.report.max_cfl_number
        );
        Ok(fields)
    }
}

#[derive(Serialize)]
struct Validation<'a> {
    problem: String,
    declared: Declared,
    reports: &'a [ValidationReport],
    passed: bool,
}

#[derive(Serialize)]
struct Declared {
    beta1: f64,
    beta2: f64,
    mu1: f64,
    lipschitz: f64,
    growth: f64,
    l_sigma: f64,
}

impl Declared {
    fn of(p: &ControlProblem) -> Self {
        Self {
            beta1: p.beta1,
            beta2: p.beta2,
            mu1: p.mu1,
            lipschitz: p.lipschitz,
            growth: p.growth,
            l_sigma: p.l_sigma,
        }
    }
}

fn validation_reports(ctx: &Context) -> Result<Vec<ValidationReport>, CliError> {
    let sampler = SamplerConfig {
        lo: ctx.config.sample_box[0],
        hi: ctx.config.sample_box[1],
        seed: ctx.config.seed,
    };
    Ok(vec![
        validate_monotonicity(&ctx.problem, &sampler, ctx.config.samples)?,
        validate_lipschitz(&ctx.problem, &sampler, ctx.config.samples)?,
    ])
}

fn print_validation(p: &ControlProblem, reports: &[ValidationReport]) {
    println!(
        "problem {}: beta1 = {}, beta2 = {}, mu1 = {}, K = {}, L = {}, L_sigma = {}",
        p.name, p.beta1, p.beta2, p.mu1, p.lipschitz, p.growth, p.l_sigma
    );
    for r in reports {
        let fitted: Vec<String> = r
            .fitted
            .iter()
            .map(|(k, v)| format!("{k} = {v:.4}"))
            .collect();
        println!(
            "  {}: {} (worst violation {:.3e} over {} samples; fitted {})",
            r.assumption,
            if r.passed { "ok" } else { "FAILED" },
            r.worst_violation,
            r.samples,
            fitted.join(", ")
        );
        for c in &r.failed_constraints {
            println!("    violated constraint: {c}");
        }
    }
}

pub fn validate(ctx: &mut Context) -> Result<Status, CliError> {
    let reports = validation_reports(ctx)?;
    print_validation(&ctx.problem, &reports);
    let passed = reports.iter().all(|r| r.passed);
    let path = ctx.out.json(
        "validation.json",
        &Validation {
            problem: ctx.problem.name.clone(),
            declared: Declared::of(&ctx.problem),
            reports: &reports,
            passed,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(if passed {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

#[derive(Serialize)]
struct RunReport<'a> {
    pipeline: &'static str,
    slices: usize,
    report: &'a SolveReport,
}

fn write_run(
    ctx: &mut Context,
    pipeline: &'static str,
    fields: &FieldSequence,
) -> Result<(), CliError> {
    ctx.out.fields(&format!("{pipeline}_fields.csv"), fields)?;
    ctx.out.json(
        &format!("{pipeline}_report.json"),
        &RunReport {
            pipeline,
            slices: fields.len(),
            report: &fields.report,
        },
    )?;
    if ctx.config.emit_plot_data {
        ctx.out.plot(&format!("{pipeline}_plot.csv"), fields)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Agreement<'a> {
    check: &'a CheckOutcome,
}

fn print_outcome(c: &CheckOutcome) {
    let at = c
        .witness
        .as_ref()
        .map(|w| format!(" at slice {} (t = {}, x = {})", w.slice, w.t, w.x))
        .unwrap_or_default();
    let threshold = if c.threshold.abs() == f64::MAX {
        "finite".to_string()
    } else {
        format!("{:.4e}", c.threshold)
    };
    println!(
        "  {}: {} (measured {:.4e}, threshold {threshold}){at}",
        c.id,
        if c.passed { "ok" } else { "FAILED" },
        c.measured,
    );
}

fn agreement(
    ctx: &mut Context,
    dpp: &FieldSequence,
    hjb: &FieldSequence,
) -> Result<CheckOutcome, CliError> {
    let check = pipeline_agreement(dpp, hjb, ctx.config.cross_validation_budget);
    print_outcome(&check);
    ctx.out
        .json("cross_validation.json", &Agreement { check: &check })?;
    Ok(check)
}

pub fn solve(ctx: &mut Context, pipeline: Pipeline) -> Result<Status, CliError> {
    let dpp = match pipeline {
        Pipeline::Dpp | Pipeline::Both => {
            let grids = ctx.dpp_grids()?;
            let (fields, policy) = ctx.dpp(&grids)?;
            write_run(ctx, "dpp", &fields)?;
            ctx.out.policy("dpp_policy.csv", &policy)?;
            println!(
                "dpp: {} slices, W(0, .) in [{:.6}, {:.6}]",
                fields.len(),
                min(&fields.first().values),
                max(&fields.first().values)
            );
            Some((fields, grids))
        }
        Pipeline::Hjb => None,
    };
    let hjb = match pipeline {
        Pipeline::Hjb | Pipeline::Both => {
            let grids = match &dpp {
                Some((_, g)) => g.clone(),
                None => ctx.pde_grids()?,
            };
            let fields = ctx.hjb(&grids)?;
            write_run(ctx, "hjb", &fields)?;
            println!(
                "hjb: {} slices, {} explicit steps, max algebraic residual {:.3e}",
                fields.len(),
                fields.report.pde_steps,
                fields.report.max_algebraic_residual
            );
            Some(fields)
        }
        Pipeline::Dpp => None,
    };
    if let (Some((d, _)), Some(h)) = (&dpp, &hjb) {
        agreement(ctx, d, h)?;
    }
    report_written(ctx);
    Ok(Status::Ok)
}

pub fn cross_check(ctx: &mut Context) -> Result<Status, CliError> {
    let grids = ctx.dpp_grids()?;
    let (dpp, _) = ctx.dpp(&grids)?;
    let hjb = ctx.hjb(&grids)?;
    let check = agreement(ctx, &dpp, &hjb)?;
    report_written(ctx);
    Ok(if check.passed {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

/// Result of one named check of `verify`.
#[derive(Debug, Serialize)]
struct CheckResult {
    check: String,
    passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    outcomes: Vec<CheckOutcome>,
}

#[derive(Serialize)]
struct VerifyBundle<'a> {
    checks: &'a [CheckResult],
    passed: bool,
}

fn assumptions_outcome(reports: &[ValidationReport]) -> Vec<CheckOutcome> {
    reports
        .iter()
        .map(|r| CheckOutcome {
            id: r.assumption.clone(),
            passed: r.passed,
            measured: r.worst_violation,
            threshold: VIOLATION_TOLERANCE,
            witness: None,
            metrics: r.fitted.clone(),
        })
        .collect()
}

/// Lazily computed dynamic-programming run shared by several checks.
struct Shared {
    grids: Option<GridPair>,
    run: Option<(FieldSequence, PolicyField)>,
}

fn shared_run<'a>(
    ctx: &mut Context,
    shared: &'a mut Shared,
) -> Result<(&'a GridPair, &'a (FieldSequence, PolicyField)), CliError> {
    if shared.grids.is_none() {
        shared.grids = Some(ctx.dpp_grids()?);
    }
    let grids = shared.grids.as_ref().expect("grids computed");
    if shared.run.is_none() {
        shared.run = Some(ctx.dpp(grids)?);
    }
    Ok((grids, shared.run.as_ref().expect("run computed")))
}

fn run_check(
    ctx: &mut Context,
    shared: &mut Shared,
    name: &str,
) -> Result<Vec<CheckOutcome>, CliError> {
    match name {
        "assumptions" => Ok(assumptions_outcome(&validation_reports(ctx)?)),
        "comparison" => {
            let (grids, _) = shared_run(ctx, shared)?;
            let grids = grids.clone();
            let phi2 = ctx.problem.terminal().clone();
            let eps = ctx.config.comparison_epsilon;
            let base = phi2.clone();
            let phi1: Terminal = Arc::new(move |x: &[f64]| base(x) + eps);
            Ok(vec![check_comparison(
                &ctx.problem,
                &phi1,
                &phi2,
                &grids,
                &ctx.lattice(),
                &ctx.dpp_config(),
            )?])
        }
        "regularity" => {
            let (grids, (coarse, _)) = shared_run(ctx, shared)?;
            let fine_grids = ctx.grids(grids.dt() / 2.0, ctx.config.dx / 2.0)?;
            let (fine, _) =
                value_function_dpp(&ctx.problem, &fine_grids, &ctx.lattice(), &ctx.dpp_config())?;
            let mut out = check_regularity(coarse)?;
            out.extend(check_regularity_drift(coarse, &fine)?);
            Ok(out)
        }
        "flow" => {
            let (grids, (_, policy)) = shared_run(ctx, shared)?;
            Ok(vec![check_flow_consistency(
                &ctx.problem,
                policy,
                grids,
                &ctx.lattice(),
                &ctx.one_step(),
            )?])
        }
        "cross_validation" => {
            let (grids, (dpp, _)) = shared_run(ctx, shared)?;
            let hjb = ctx.hjb(grids)?;
            Ok(vec![pipeline_agreement(
                dpp,
                &hjb,
                ctx.config.cross_validation_budget,
            )])
        }
        other => Err(Error::Config(format!("unknown check {other:?}")).into()),
    }
}

pub fn verify(ctx: &mut Context) -> Result<Status, CliError> {
    let selection = ctx.config.checks.clone();
    if selection.is_empty() {
        warn!("no checks selected; nothing to verify");
    }
    let mut shared = Shared {
        grids: None,
        run: None,
    };
    let mut results = Vec::new();
    for name in &selection {
        println!("{name}:");
        let result = match run_check(ctx, &mut shared, name) {
            Ok(outcomes) => {
                outcomes.iter().for_each(print_outcome);
                CheckResult {
                    check: name.clone(),
                    passed: outcomes.iter().all(|c| c.passed),
                    error: None,
                    outcomes,
                }
            }
            Err(CliError::Core(e)) if e.is_numerical() => {
                println!("  FAILED: {e}");
                CheckResult {
                    check: name.clone(),
                    passed: false,
                    error: Some(e.to_string()),
                    outcomes: Vec::new(),
                }
            }
            Err(e) => return Err(e),
        };
        results.push(result);
    }
    let passed = results.iter().all(|r| r.passed);
    ctx.out.json(
        "verify.json",
        &VerifyBundle {
            checks: &results,
            passed,
        },
    )?;
    report_written(ctx);
    Ok(if passed {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

fn report_written(ctx: &Context) {
    for p in ctx.out.written() {
        println!("wrote {}", p.display());
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
