//! Declarative run configuration (JSON or TOML) and problem presets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fbsde_core::expr::{Expr, Var};
use fbsde_core::model::{
    equispaced_controls, expr_terminal, identity_terminal, ExprCoefficients, DEFAULT_HORIZON,
};
use fbsde_core::{ControlProblem, Error, NoiseLattice, Result};
use serde::{Deserialize, Serialize};

/// Names accepted by `--preset` and `problem.preset`.
pub const PRESETS: [&str; 6] = [
    "example_5_1",
    "example_5_2",
    "zero",
    "linear",
    "linear_control",
    "degenerate_control",
];

pub const DEFAULT_L_SIGMA: f64 = 0.05;

/// Coefficients by preset name or by expressions over `t, x, y, z, u`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub driver: Option<String>,
    /// Terminal map over `x`; defaults to `x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub growth: Option<f64>,
    /// Declared `z`-Lipschitz constant of `sigma` for expression problems.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_lipschitz_z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Explicit points; overrides the equispaced range when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<f64>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            count: 21,
            points: None,
        }
    }
}

impl ControlConfig {
    pub fn points(&self) -> Vec<f64> {
        self.points
            .clone()
            .unwrap_or_else(|| equispaced_controls(self.lo, self.hi, self.count))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeKind {
    Trinomial,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub horizon: f64,
    /// Truncation box `[lo, hi]`.
    pub space_box: [f64; 2],
    pub dx: f64,
    pub delta: f64,
    pub controls: ControlConfig,
    pub lattice: LatticeKind,
    /// CFL safety factor of the finite-difference scheme.
    pub theta: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub algebraic_tolerance: f64,
    pub algebraic_max_iter: usize,
    /// Shrink `delta` to the admissible contraction step instead of failing.
    pub auto_delta: bool,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    /// Samples per validator.
    pub samples: usize,
    /// Sampling box of the validators, per coordinate.
    pub sample_box: [f64; 2],
    /// Checks run by `verify`.
    pub checks: Vec<String>,
    /// Terminal shift of the comparison check.
    pub comparison_epsilon: f64,
    pub cross_validation_budget: f64,
    pub emit_plot_data: bool,
}

/// Checks run by `verify` when none are selected explicitly.
pub const ALL_CHECKS: [&str; 5] = [
    "assumptions",
    "comparison",
    "regularity",
    "flow",
    "cross_validation",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            horizon: DEFAULT_HORIZON,
            space_box: [-2.0, 2.0],
            dx: 0.02,
            delta: 1e-3,
            controls: ControlConfig::default(),
            lattice: LatticeKind::Trinomial,
            theta: 0.9,
            tolerance: 1e-10,
            max_iter: 100,
            algebraic_tolerance: 1e-12,
            algebraic_max_iter: 200,
            auto_delta: false,
            output_dir: None,
            seed: 0x5eed,
            samples: 2000,
            sample_box: [-5.0, 5.0],
            checks: ALL_CHECKS.iter().map(|s| s.to_string()).collect(),
            comparison_epsilon: 0.5,
            cross_validation_budget: fbsde_core::verify::CROSS_VALIDATION_BUDGET,
            emit_plot_data: false,
        }
    }
}

impl RunConfig {
    /// Parses JSON or TOML, chosen by extension (`.json`, otherwise TOML).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_text(&text, is_json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_text(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| {
                Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
            })
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.horizon),
            ("dx", self.dx),
            ("delta", self.delta),
            ("theta", self.theta),
            ("tolerance", self.tolerance),
            ("algebraic_tolerance", self.algebraic_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !ordered(self.space_box) {
            return Err(Error::Config(format!(
                "space_box must satisfy lo < hi, got {:?}",
                self.space_box
            )));
        }
        if !ordered(self.sample_box) {
            return Err(Error::Config(format!(
                "sample_box must satisfy lo < hi, got {:?}",
                self.sample_box
            )));
        }
        if self.max_iter == 0 || self.algebraic_max_iter == 0 || self.samples == 0 {
            return Err(Error::Config(
                "iteration budgets and sample counts must be positive".into(),
            ));
        }
        for c in &self.checks {
            if !ALL_CHECKS.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown check {c:?}; known: {}",
                    ALL_CHECKS.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn noise_lattice(&self) -> NoiseLattice {
        match self.lattice {
            LatticeKind::Trinomial => NoiseLattice::trinomial(1),
            LatticeKind::Bernoulli => NoiseLattice::bernoulli(1),
        }
    }

    /// Builds the problem instance this configuration describes.
    pub fn build_problem(&self) -> Result<ControlProblem> {
        let pc = &self.problem;
        let has_expr = pc.drift.is_some() || pc.diffusion.is_some() || pc.driver.is_some();
        let base = match (&pc.preset, has_expr) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "give either a preset or coefficient expressions, not both".into(),
                ))
            }
            (Some(name), false) => preset(name, pc.l_sigma)?,
            (None, true) => expression_problem(pc)?,
            (None, false) => {
                return Err(Error::Config(
                    "no problem given: set a preset or coefficient expressions".into(),
                ))
            }
        };
        let mut p = base
            .with_controls(self.controls.points())
            .map_err(to_config)?;
        p = p.with_horizon(self.horizon).map_err(to_config)?;
        if let Some(t) = &pc.terminal {
            if pc.preset.is_some() {
                p = p.with_terminal(expr_terminal(parse(t, "terminal")?).map_err(to_config)?);
            }
        }
        Ok(p)
    }
}

fn ordered(b: [f64; 2]) -> bool {
    b[0] < b[1]
}

fn to_config(e: Error) -> Error {
    match e {
        Error::Input(m) => Error::Config(m),
        other => other,
    }
}

fn parse(text: &str, field: &str) -> Result<Expr> {
    Expr::parse(text).map_err(|e| Error::Config(format!("problem.{field}: {e}")))
}

fn expr_preset(
    name: &str,
    b: &str,
    s: &str,
    f: &str,
    constants: (f64, f64, f64),
    k: f64,
    l: f64,
) -> ControlProblem {
    let c = ExprCoefficients::parse(b, s, f).expect("preset expressions parse");
    ControlProblem::builder(Arc::new(c), identity_terminal())
        .name(name)
        .monotonicity(constants.0, constants.1, constants.2)
        .lipschitz(k, l, 0.0)
        .sigma_dependence(false, false)
        .build()
        .expect("preset is valid")
}

/// Built-in problem by name.
pub fn preset(name: &str, l_sigma: Option<f64>) -> Result<ControlProblem> {
    if l_sigma.is_some() && name != "example_5_2" {
        return Err(Error::Config(format!(
            "l_sigma applies to example_5_2 only, not {name}"
        )));
    }
    Ok(match name {
        "example_5_1" => ControlProblem::example_5_1(),
        "example_5_2" => {
            ControlProblem::example_5_2(l_sigma.unwrap_or(DEFAULT_L_SIGMA)).map_err(to_config)?
        }
        // constant coefficients leave the monotonicity form identically zero
        "zero" => expr_preset("zero", "0", "0", "0", (0.0, 0.0, 1.0), 1.0, 1.0),
        "linear" => expr_preset("linear", "0", "1", "1", (0.0, 0.0, 1.0), 1.0, 2.0),
        "linear_control" => expr_preset("linear_control", "0", "1", "u", (0.0, 0.0, 1.0), 1.0, 2.0),
        "degenerate_control" => expr_preset(
            "degenerate_control",
            "0",
            "0",
            "u",
            (0.0, 0.0, 1.0),
            1.0,
            2.0,
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known: {}",
                PRESETS.join(", ")
            )));
        }
    })
}

fn expression_problem(pc: &ProblemConfig) -> Result<ControlProblem> {
    let field = |v: &Option<String>, name: &str| -> Result<Expr> {
        match v {
            Some(t) => parse(t, name),
            None => Err(Error::Config(format!(
                "problem.{name} is required with coefficient expressions"
            ))),
        }
    };
    let drift = field(&pc.drift, "drift")?;
    let diffusion = field(&pc.diffusion, "diffusion")?;
    let driver = field(&pc.driver, "driver")?;
    let on_z = diffusion.mentions(Var::Z);
    let on_u = diffusion.mentions(Var::U);
    let terminal = match &pc.terminal {
        Some(t) => expr_terminal(parse(t, "terminal")?).map_err(to_config)?,
        None => identity_terminal(),
    };
    let coefficients = ExprCoefficients {
        drift,
        diffusion,
        driver,
    };
    ControlProblem::builder(Arc::new(coefficients), terminal)
        .name("custom")
        .monotonicity(
            pc.beta1.unwrap_or(0.0),
            pc.beta2.unwrap_or(0.0),
            pc.mu1.unwrap_or(0.0),
        )
        .lipschitz(
            pc.lipschitz.unwrap_or(0.0),
            pc.growth.unwrap_or(0.0),
            pc.sigma_lipschitz_z.unwrap_or(0.0),
        )
        .sigma_dependence(on_z, on_u)
        .build()
        .map_err(to_config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_and_json_agree() {
        let toml_text =
            "horizon = 0.5\ndx = 0.05\n[problem]\npreset = \"example_5_2\"\nl_sigma = 0.1\n";
        let json_text =
            r#"{"horizon": 0.5, "dx": 0.05, "problem": {"preset": "example_5_2", "l_sigma": 0.1}}"#;
        let a = RunConfig::from_text(toml_text, false).unwrap();
        let b = RunConfig::from_text(json_text, true).unwrap();
        assert_eq!(a, b);
        let p = a.build_problem().unwrap();
        assert_eq!(p.l_sigma, 0.1);
        assert_eq!(p.horizon, 0.5);
    }

    #[test]
    fn unknown_field_is_reported_with_position() {
        let e = RunConfig::from_text("{\n  \"horizn\": 1.0\n}", true).unwrap_err();
        let Error::Config(m) = e else { panic!("{e:?}") };
        assert!(m.contains("line 2") && m.contains("horizn"), "{m}");
        let e = RunConfig::from_text("dx = \"wide\"\n", false).unwrap_err();
        let Error::Config(m) = e else { panic!("{e:?}") };
        assert!(m.contains("dx"), "{m}");
    }

    #[test]
    fn expression_problem_infers_sigma_dependence() {
        let cfg = RunConfig {
            problem: ProblemConfig {
                drift: Some("-pos(x) - 4*y + u".into()),
                diffusion: Some("x + 0.05*z".into()),
                driver: Some("2*x - pos(y) - z + u".into()),
                beta1: Some(1.0),
                beta2: Some(0.05),
                mu1: Some(1.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let p = cfg.build_problem().unwrap();
        assert!(p.sigma_depends_on_z && !p.sigma_depends_on_u);
    }

    #[test]
    fn preset_conflicts_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.build_problem().is_err());
        cfg.problem.preset = Some("example_5_1".into());
        cfg.problem.drift = Some("x".into());
        assert!(cfg.build_problem().is_err());
        assert!(preset("example_5_1", Some(0.1)).is_err());
        assert!(preset("nope", None).is_err());
    }

    #[test]
    fn unknown_check_rejected() {
        let cfg = RunConfig {
            checks: vec!["everything".into()],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
