//! Controlled fully coupled FBSDE problems.
//!
//! A [`ControlProblem`] bundles the coefficients `b`, `sigma`, `f` of
//!
//! ```text
//! dX = b(s, X, Y, Z, u) ds + sigma(s, X, Y, Z, u) dB,   X_t = x
//! dY = -f(s, X, Y, Z, u) ds + Z dB,                     Y_T = Phi(X_T)
//! ```
//!
//! with the terminal map `Phi`, the monotonicity constants of the stacked map
//! `A = (-G^T f, G b, G sigma)`, claimed Lipschitz/growth constants and a finite
//! control set. The backward dimension is always one.
//!
//! Structural assumptions are checked by sampling ([`validate_monotonicity`],
//! [`validate_lipschitz`]); the admissible contraction step is measured by
//! [`contraction_step_bound`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Point, Var};
use crate::fbsde::{one_step_solve, NoiseLattice, OneStepOptions};

/// Coefficient evaluators `b`, `sigma`, `f`.
///
/// `x` has length `n`, `z` length `d`; `diffusion` writes the `n x d` matrix
/// row-major into `out`.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]);
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64;
}

/// Terminal evaluator `x -> Phi(x)`.
pub type Terminal = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Coefficients of the linear fully coupled system with `sigma` driven by the control.
#[derive(Debug, Clone, Copy, Default)]
pub struct Example51;

impl Coefficients for Example51 {
    fn drift(&self, _t: f64, x: &[f64], _y: f64, z: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = 3.0 * x[0] + 5.0 * z[0];
    }
    fn diffusion(&self, _t: f64, x: &[f64], y: f64, _z: &[f64], u: f64, out: &mut [f64]) {
        out[0] = 4.0 * x[0] - 5.0 * y + u;
    }
    fn driver(&self, _t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64 {
        2.0 * x[0] + 3.0 * y + 4.0 * z[0] + u
    }
}

/// Coefficients of the system whose diffusion depends on `z` with slope `-l_sigma`.
#[derive(Debug, Clone, Copy)]
pub struct Example52 {
    pub l_sigma: f64,
}

impl Coefficients for Example52 {
    fn drift(&self, _t: f64, x: &[f64], y: f64, _z: &[f64], u: f64, out: &mut [f64]) {
        out[0] = -x[0].max(0.0) - 4.0 * y + u;
    }
    fn diffusion(&self, _t: f64, x: &[f64], _y: f64, z: &[f64], _u: f64, out: &mut [f64]) {
        out[0] = -x[0] - self.l_sigma * z[0];
    }
    fn driver(&self, _t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64 {
        2.0 * x[0] - y.max(0.0) - z[0] + u
    }
}

/// Scalar coefficients given by parsed expressions over `(t, x, y, z, u)`.
#[derive(Debug, Clone)]
pub struct ExprCoefficients {
    pub drift: Expr,
    pub diffusion: Expr,
    pub driver: Expr,
}

impl ExprCoefficients {
    pub fn parse(drift: &str, diffusion: &str, driver: &str) -> Result<Self> {
        Ok(Self {
            drift: Expr::parse(drift)?,
            diffusion: Expr::parse(diffusion)?,
            driver: Expr::parse(driver)?,
        })
    }
}

fn point(t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> Point {
    Point {
        t,
        x: x[0],
        y,
        z: z[0],
        u,
    }
}

impl Coefficients for ExprCoefficients {
    fn drift(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]) {
        out[0] = self.drift.eval(&point(t, x, y, z, u));
    }
    fn diffusion(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]) {
        out[0] = self.diffusion.eval(&point(t, x, y, z, u));
    }
    fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64 {
        self.driver.eval(&point(t, x, y, z, u))
    }
}

/// One controlled FBSDE problem instance. Immutable once built.
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    /// Forward state dimension.
    pub n: usize,
    /// Brownian dimension.
    pub d: usize,
    coefficients: Arc<dyn Coefficients>,
    terminal: Terminal,
    /// Row vector `G` (the backward dimension is one).
    pub g: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub mu1: f64,
    /// Claimed Lipschitz constant `K`.
    pub lipschitz: f64,
    /// Claimed linear-growth constant `L`.
    pub growth: f64,
    /// Claimed Lipschitz constant of `sigma` in `z`.
    pub l_sigma: f64,
    pub sigma_depends_on_z: bool,
    pub sigma_depends_on_u: bool,
    pub control_set: Vec<f64>,
    pub horizon: f64,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("g", &self.g)
            .field("beta1", &self.beta1)
            .field("beta2", &self.beta2)
            .field("mu1", &self.mu1)
            .field("lipschitz", &self.lipschitz)
            .field("growth", &self.growth)
            .field("l_sigma", &self.l_sigma)
            .field("sigma_depends_on_z", &self.sigma_depends_on_z)
            .field("sigma_depends_on_u", &self.sigma_depends_on_u)
            .field("controls", &self.control_set.len())
            .field("horizon", &self.horizon)
            .finish()
    }
}

/// Builder for [`ControlProblem`]; `build` enforces the structural invariants.
pub struct ProblemBuilder {
    problem: ControlProblem,
}

impl ProblemBuilder {
    pub fn dims(mut self, n: usize, d: usize) -> Self {
        self.problem.n = n;
        self.problem.d = d;
        if self.problem.g.len() != n {
            self.problem.g = unit_row(n);
        }
        self
    }

    pub fn g(mut self, g: Vec<f64>) -> Self {
        self.problem.g = g;
        self
    }

    pub fn monotonicity(mut self, beta1: f64, beta2: f64, mu1: f64) -> Self {
        self.problem.beta1 = beta1;
        self.problem.beta2 = beta2;
        self.problem.mu1 = mu1;
        self
    }

    pub fn lipschitz(mut self, k: f64, l: f64, l_sigma: f64) -> Self {
        self.problem.lipschitz = k;
        self.problem.growth = l;
        self.problem.l_sigma = l_sigma;
        self
    }

    pub fn sigma_dependence(mut self, on_z: bool, on_u: bool) -> Self {
        self.problem.sigma_depends_on_z = on_z;
        self.problem.sigma_depends_on_u = on_u;
        self
    }

    pub fn controls(mut self, controls: Vec<f64>) -> Self {
        self.problem.control_set = controls;
        self
    }

    pub fn horizon(mut self, horizon: f64) -> Self {
        self.problem.horizon = horizon;
        self
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.problem.name = name.into();
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let p = self.problem;
        if p.n == 0 || p.d == 0 {
            return Err(Error::input("dimensions n and d must be positive"));
        }
        if p.g.len() != p.n {
            return Err(Error::Dimension {
                what: "G row",
                expected: p.n,
                actual: p.g.len(),
            });
        }
        if !p.g.iter().all(|g| g.is_finite()) || p.g.iter().all(|g| *g == 0.0) {
            return Err(Error::input(
                "G must be finite with full rank (a nonzero row)",
            ));
        }
        for (name, v) in [
            ("beta1", p.beta1),
            ("beta2", p.beta2),
            ("mu1", p.mu1),
            ("K", p.lipschitz),
            ("L", p.growth),
            ("L_sigma", p.l_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::input(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if p.sigma_depends_on_z && p.sigma_depends_on_u {
            return Err(Error::input(
                "sigma may depend on z or on the control, not both",
            ));
        }
        if p.sigma_depends_on_z && p.beta2 <= 0.0 {
            return Err(Error::input("sigma depends on z, which requires beta2 > 0"));
        }
        if p.control_set.is_empty() {
            return Err(Error::input("control set is empty"));
        }
        if !p.control_set.iter().all(|u| u.is_finite()) {
            return Err(Error::input("control points must be finite"));
        }
        if !(p.horizon.is_finite() && p.horizon > 0.0) {
            return Err(Error::input(format!(
                "horizon must be positive, got {}",
                p.horizon
            )));
        }
        Ok(p)
    }
}

fn unit_row(n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n];
    g[0] = 1.0;
    g
}

/// `count` equispaced points on `[lo, hi]`.
pub fn equispaced_controls(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Default horizon of the built-in presets.
pub const DEFAULT_HORIZON: f64 = 0.25;

impl ControlProblem {
    /// Start a problem with `n = d = 1`, `G = 1`, zero constants and the
    /// default control set (21 points on `[-1, 1]`).
    pub fn builder(coefficients: Arc<dyn Coefficients>, terminal: Terminal) -> ProblemBuilder {
        ProblemBuilder {
            problem: ControlProblem {
                name: "custom".into(),
                n: 1,
                d: 1,
                coefficients,
                terminal,
                g: vec![1.0],
                beta1: 0.0,
                beta2: 0.0,
                mu1: 0.0,
                lipschitz: 0.0,
                growth: 0.0,
                l_sigma: 0.0,
                sigma_depends_on_z: false,
                sigma_depends_on_u: false,
                control_set: equispaced_controls(-1.0, 1.0, 21),
                horizon: DEFAULT_HORIZON,
            },
        }
    }

    /// Linear system with control in the diffusion; `Phi(x) = x`.
    pub fn example_5_1() -> Self {
        Self::builder(Arc::new(Example51), identity_terminal())
            .name("example_5_1")
            .monotonicity(2.0, 0.0, 1.0)
            .lipschitz(5.0, 10.0, 0.0)
            .sigma_dependence(false, true)
            .build()
            .expect("preset is valid")
    }

    /// System with `sigma = -x - l_sigma z`; `Phi(x) = x`.
    pub fn example_5_2(l_sigma: f64) -> Result<Self> {
        if !(l_sigma.is_finite() && l_sigma >= 0.0) {
            return Err(Error::input(format!(
                "L_sigma must be nonnegative, got {l_sigma}"
            )));
        }
        // Young's inequality on the cross terms leaves -x^2 - 3y^2 - l_sigma z^2.
        let beta2 = l_sigma.min(3.0);
        Self::builder(Arc::new(Example52 { l_sigma }), identity_terminal())
            .name("example_5_2")
            .monotonicity(1.0, beta2, 1.0)
            .lipschitz(4.0_f64.max(l_sigma), 5.0_f64.max(1.0 + l_sigma), l_sigma)
            .sigma_dependence(l_sigma > 0.0, false)
            .build()
    }

    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coefficients
    }

    pub fn terminal(&self) -> &Terminal {
        &self.terminal
    }

    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    /// Same dynamics with a different terminal map.
    pub fn with_terminal(&self, terminal: Terminal) -> Self {
        Self {
            terminal,
            ..self.clone()
        }
    }

    pub fn with_controls(&self, controls: Vec<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.control_set = controls;
        ProblemBuilder { problem: p }.build()
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        let mut p = self.clone();
        p.horizon = horizon;
        ProblemBuilder { problem: p }.build()
    }

    pub fn drift(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]) {
        self.coefficients.drift(t, x, y, z, u, out)
    }

    pub fn diffusion(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64, out: &mut [f64]) {
        self.coefficients.diffusion(t, x, y, z, u, out)
    }

    pub fn driver(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: f64) -> f64 {
        self.coefficients.driver(t, x, y, z, u)
    }

    /// Scalar drift for `n = d = 1`.
    #[inline]
    pub fn drift1(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> f64 {
        let mut out = [0.0];
        self.coefficients.drift(t, &[x], y, &[z], u, &mut out);
        out[0]
    }

    /// Scalar diffusion for `n = d = 1`.
    #[inline]
    pub fn diffusion1(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> f64 {
        let mut out = [0.0];
        self.coefficients.diffusion(t, &[x], y, &[z], u, &mut out);
        out[0]
    }

    #[inline]
    pub fn driver1(&self, t: f64, x: f64, y: f64, z: f64, u: f64) -> f64 {
        self.coefficients.driver(t, &[x], y, &[z], u)
    }

    pub fn require_scalar(&self, what: &str) -> Result<()> {
        if self.n != 1 || self.d != 1 {
            return Err(Error::input(format!(
                "{what} supports n = d = 1 only (problem has n = {}, d = {})",
                self.n, self.d
            )));
        }
        Ok(())
    }
}

pub fn identity_terminal() -> Terminal {
    Arc::new(|x: &[f64]| x[0])
}

/// Terminal map `Phi(x) = expr(x)` for a one-dimensional state.
pub fn expr_terminal(expr: Expr) -> Result<Terminal> {
    for v in [Var::T, Var::Y, Var::Z, Var::U] {
        if expr.mentions(v) {
            return Err(Error::input("terminal expression may only use x"));
        }
    }
    Ok(Arc::new(move |x: &[f64]| {
        expr.eval(&Point {
            x: x[0],
            ..Point::default()
        })
    }))
}

/// A point `lambda = (x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda {
    pub x: Vec<f64>,
    pub y: f64,
    pub z: Vec<f64>,
}

impl Lambda {
    pub fn scalar(x: f64, y: f64, z: f64) -> Self {
        Self {
            x: vec![x],
            y,
            z: vec![z],
        }
    }

    fn check(&self, problem: &ControlProblem) -> Result<()> {
        if self.x.len() != problem.n {
            return Err(Error::Dimension {
                what: "x",
                expected: problem.n,
                actual: self.x.len(),
            });
        }
        if self.z.len() != problem.d {
            return Err(Error::Dimension {
                what: "z",
                expected: problem.d,
                actual: self.z.len(),
            });
        }
        Ok(())
    }

    /// Stacked as `(x, y, z)`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.push(self.y);
        v.extend_from_slice(&self.z);
        v
    }
}

/// The stacked map `A(t, lambda) = (-G^T f, G b, G sigma)` at control `u`.
///
/// Length `n + 1 + d`.
pub fn assemble_a(problem: &ControlProblem, t: f64, lam: &Lambda, u: f64) -> Result<Vec<f64>> {
    lam.check(problem)?;
    let (n, d) = (problem.n, problem.d);
    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    problem.drift(t, &lam.x, lam.y, &lam.z, u, &mut b);
    problem.diffusion(t, &lam.x, lam.y, &lam.z, u, &mut sigma);
    let f = problem.driver(t, &lam.x, lam.y, &lam.z, u);
    let g = &problem.g;
    let mut a = Vec::with_capacity(n + 1 + d);
    a.extend(g.iter().map(|gi| -gi * f));
    a.push(g.iter().zip(&b).map(|(gi, bi)| gi * bi).sum());
    for k in 0..d {
        a.push((0..n).map(|i| g[i] * sigma[i * d + k]).sum());
    }
    Ok(a)
}

/// Box the validators sample from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            lo: -5.0,
            hi: 5.0,
            seed: 0x5eed,
        }
    }
}

impl SamplerConfig {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Sample location attaining a reported violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Which form was evaluated (`"interior"`, `"terminal"`, or a coefficient name).
    pub form: String,
    pub t: f64,
    pub u: f64,
    pub lambda: Lambda,
    pub lambda_bar: Lambda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub assumption: String,
    pub samples: usize,
    /// Largest positive excess over the declared bound (0 when it holds).
    pub worst_violation: f64,
    pub witness: Option<Witness>,
    /// Empirically tightest constants.
    pub fitted: BTreeMap<String, f64>,
    /// Constant constraints that fail independently of sampling.
    pub failed_constraints: Vec<String>,
    pub passed: bool,
}

/// Absolute slack for sampled violations (rounding of exact identities).
pub const VIOLATION_TOLERANCE: f64 = 1e-9;

struct PairSample {
    t: f64,
    u: f64,
    a: Lambda,
    b: Lambda,
}

fn sample_lambda(rng: &mut ChaCha8Rng, cfg: &SamplerConfig, n: usize, d: usize) -> Lambda {
    let mut draw = || rng.gen_range(cfg.lo..=cfg.hi);
    Lambda {
        x: (0..n).map(|_| draw()).collect(),
        y: draw(),
        z: (0..d).map(|_| draw()).collect(),
    }
}

fn sample_pair(rng: &mut ChaCha8Rng, cfg: &SamplerConfig, problem: &ControlProblem) -> PairSample {
    let t = rng.gen_range(0.0..=problem.horizon);
    let u = problem.control_set[rng.gen_range(0..problem.control_set.len())];
    let a = sample_lambda(rng, cfg, problem.n, problem.d);
    let b = sample_lambda(rng, cfg, problem.n, problem.d);
    PairSample { t, u, a, b }
}

/// Perturb a single stacked coordinate of `base`.
fn axis_pair(
    rng: &mut ChaCha8Rng,
    cfg: &SamplerConfig,
    problem: &ControlProblem,
    axis: usize,
) -> PairSample {
    let mut s = sample_pair(rng, cfg, problem);
    let mut stacked = s.a.stacked();
    stacked[axis] = rng.gen_range(cfg.lo..=cfg.hi);
    let (n, d) = (problem.n, problem.d);
    s.b = Lambda {
        x: stacked[..n].to_vec(),
        y: stacked[n],
        z: stacked[n + 1..n + 1 + d].to_vec(),
    };
    s
}

struct MonotoneTerms {
    /// `<A(lam) - A(lam_bar), lam - lam_bar>`
    form: f64,
    /// `|G dx|^2`
    gx2: f64,
    /// `|G^T dy|^2 + |G^T dz|^2`
    gyz2: f64,
    /// `<Phi(x) - Phi(x_bar), G (x - x_bar)>`
    terminal: f64,
}

fn monotone_terms(
    problem: &ControlProblem,
    t: f64,
    u: f64,
    a: &Lambda,
    b: &Lambda,
) -> Result<MonotoneTerms> {
    let aa = assemble_a(problem, t, a, u)?;
    let ab = assemble_a(problem, t, b, u)?;
    let la = a.stacked();
    let lb = b.stacked();
    let form = aa
        .iter()
        .zip(&ab)
        .zip(la.iter().zip(&lb))
        .map(|((p, q), (r, s))| (p - q) * (r - s))
        .sum();
    let g = &problem.g;
    let g2: f64 = g.iter().map(|v| v * v).sum();
    let gx: f64 = g
        .iter()
        .zip(a.x.iter().zip(&b.x))
        .map(|(gi, (p, q))| gi * (p - q))
        .sum();
    let dy = a.y - b.y;
    let dz2: f64 = a.z.iter().zip(&b.z).map(|(p, q)| (p - q) * (p - q)).sum();
    let dphi = problem.terminal_value(&a.x) - problem.terminal_value(&b.x);
    Ok(MonotoneTerms {
        form,
        gx2: gx * gx,
        gyz2: g2 * (dy * dy + dz2),
        terminal: dphi * gx,
    })
}

/// Re-evaluates the violation a monotonicity witness claims.
pub fn monotonicity_excess(problem: &ControlProblem, w: &Witness) -> Result<f64> {
    let m = monotone_terms(problem, w.t, w.u, &w.lambda, &w.lambda_bar)?;
    Ok(match w.form.as_str() {
        "terminal" => problem.mu1 * m.gx2 - m.terminal,
        _ => m.form + problem.beta1 * m.gx2 + problem.beta2 * m.gyz2,
    })
}

/// Constant constraints attached to the monotonicity assumption.
pub fn monotonicity_constraints(problem: &ControlProblem) -> Vec<String> {
    let mut failed = Vec::new();
    let (b1, b2, mu) = (problem.beta1, problem.beta2, problem.mu1);
    if b1 + b2 <= 0.0 {
        failed.push("beta1 + beta2 > 0".to_string());
    }
    if b2 + mu <= 0.0 {
        failed.push("beta2 + mu1 > 0".to_string());
    }
    // backward dimension m = 1
    if 1 > problem.n && !(b1 > 0.0 && mu > 0.0) {
        failed.push("m > n requires beta1 > 0 and mu1 > 0".to_string());
    }
    if 1 < problem.n && b2 <= 0.0 {
        failed.push("m < n requires beta2 > 0".to_string());
    }
    if problem.sigma_depends_on_z && b2 <= 0.0 {
        failed.push("sigma depends on z requires beta2 > 0".to_string());
    }
    failed
}

/// Samples the monotonicity forms at `count` random pairs (plus as many
/// single-coordinate pairs) and reports the worst excess over the declared
/// constants together with the tightest constants consistent with the samples.
pub fn validate_monotonicity(
    problem: &ControlProblem,
    sampler: &SamplerConfig,
    count: usize,
) -> Result<ValidationReport> {
    if count == 0 {
        return Err(Error::input("sample count must be at least 1"));
    }
    let mut rng = sampler.rng();
    let dim = problem.n + 1 + problem.d;
    let mut worst = 0.0_f64;
    let mut witness: Option<Witness> = None;
    let mut beta1_fit = f64::INFINITY;
    let mut beta2_fit = f64::INFINITY;
    let mut mu1_fit = f64::INFINITY;
    let mut samples = 0;
    for i in 0..2 * count {
        let s = if i < count {
            sample_pair(&mut rng, sampler, problem)
        } else {
            axis_pair(&mut rng, sampler, problem, i % dim)
        };
        samples += 1;
        let m = monotone_terms(problem, s.t, s.u, &s.a, &s.b)?;
        let interior = m.form + problem.beta1 * m.gx2 + problem.beta2 * m.gyz2;
        let terminal = problem.mu1 * m.gx2 - m.terminal;
        if m.gx2 > 1e-12 {
            beta1_fit = beta1_fit.min((-m.form - problem.beta2 * m.gyz2) / m.gx2);
            mu1_fit = mu1_fit.min(m.terminal / m.gx2);
        }
        if m.gyz2 > 1e-12 {
            beta2_fit = beta2_fit.min((-m.form - problem.beta1 * m.gx2) / m.gyz2);
        }
        for (form, excess) in [("interior", interior), ("terminal", terminal)] {
            if excess > worst {
                worst = excess;
                witness = Some(Witness {
                    form: form.to_string(),
                    t: s.t,
                    u: s.u,
                    lambda: s.a.clone(),
                    lambda_bar: s.b.clone(),
                });
            }
        }
    }
    let mut fitted = BTreeMap::new();
    for (k, v) in [("beta1", beta1_fit), ("beta2", beta2_fit), ("mu1", mu1_fit)] {
        if v.is_finite() {
            fitted.insert(k.to_string(), v);
        }
    }
    let failed_constraints = monotonicity_constraints(problem);
    let passed = failed_constraints.is_empty() && worst <= VIOLATION_TOLERANCE;
    Ok(ValidationReport {
        assumption: "monotonicity".into(),
        samples,
        worst_violation: worst,
        witness,
        fitted,
        failed_constraints,
        passed,
    })
}

fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum()
}

/// Largest sampled Lipschitz ratios `|dl| / (|dx| + |dy| + |dz|)` of each
/// coefficient, the `z`-ratio of `sigma` and the linear-growth ratio.
pub fn validate_lipschitz(
    problem: &ControlProblem,
    sampler: &SamplerConfig,
    count: usize,
) -> Result<ValidationReport> {
    if count == 0 {
        return Err(Error::input("sample count must be at least 1"));
    }
    let (n, d) = (problem.n, problem.d);
    let dim = n + 1 + d;
    let mut rng = sampler.rng();
    let mut ratio = BTreeMap::<&'static str, (f64, Option<PairSample>)>::new();
    for k in ["b", "sigma", "f", "phi", "sigma_z", "growth"] {
        ratio.insert(k, (0.0, None));
    }
    let mut ba = vec![0.0; n];
    let mut bb = vec![0.0; n];
    let mut sa = vec![0.0; n * d];
    let mut sb = vec![0.0; n * d];
    let mut samples = 0;
    let bump = |key: &'static str,
                r: f64,
                s: &PairSample,
                table: &mut BTreeMap<&'static str, (f64, Option<PairSample>)>| {
        let e = table.get_mut(key).expect("known key");
        if r > e.0 {
            *e = (
                r,
                Some(PairSample {
                    t: s.t,
                    u: s.u,
                    a: s.a.clone(),
                    b: s.b.clone(),
                }),
            );
        }
    };
    for i in 0..3 * count {
        let s = if i < count {
            sample_pair(&mut rng, sampler, problem)
        } else if i < 2 * count {
            axis_pair(&mut rng, sampler, problem, i % dim)
        } else {
            // vary z only
            let mut s = sample_pair(&mut rng, sampler, problem);
            s.b = Lambda {
                z: s.b.z.clone(),
                ..s.a.clone()
            };
            s
        };
        samples += 1;
        let (a, b) = (&s.a, &s.b);
        problem.drift(s.t, &a.x, a.y, &a.z, s.u, &mut ba);
        problem.drift(s.t, &b.x, b.y, &b.z, s.u, &mut bb);
        problem.diffusion(s.t, &a.x, a.y, &a.z, s.u, &mut sa);
        problem.diffusion(s.t, &b.x, b.y, &b.z, s.u, &mut sb);
        let fa = problem.driver(s.t, &a.x, a.y, &a.z, s.u);
        let fb = problem.driver(s.t, &b.x, b.y, &b.z, s.u);
        let pa = problem.terminal_value(&a.x);
        let pb = problem.terminal_value(&b.x);
        for v in [&ba, &sa] {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::input("non-finite coefficient value"));
            }
        }
        if !(fa.is_finite() && pa.is_finite()) {
            return Err(Error::input("non-finite coefficient value"));
        }
        let dx = diff_norm(&a.x, &b.x);
        let dz = diff_norm(&a.z, &b.z);
        let dl = dx + (a.y - b.y).abs() + dz;
        if dl > 1e-12 {
            bump("b", diff_norm(&ba, &bb) / dl, &s, &mut ratio);
            bump("sigma", diff_norm(&sa, &sb) / dl, &s, &mut ratio);
            bump("f", (fa - fb).abs() / dl, &s, &mut ratio);
        }
        if dx > 1e-12 {
            bump("phi", (pa - pb).abs() / dx, &s, &mut ratio);
        }
        if dz > 1e-12 && dx == 0.0 && a.y == b.y {
            bump("sigma_z", diff_norm(&sa, &sb) / dz, &s, &mut ratio);
        }
        let size = 1.0 + norm1(&a.x) + a.y.abs() + norm1(&a.z);
        bump(
            "growth",
            (norm1(&ba) + norm1(&sa) + fa.abs() + pa.abs()) / size,
            &s,
            &mut ratio,
        );
    }
    let k_fit = ["b", "sigma", "f", "phi"]
        .iter()
        .map(|k| ratio[k].0)
        .fold(0.0, f64::max);
    let mut worst = 0.0;
    let mut witness = None;
    let mut consider = |excess: f64, key: &'static str| {
        if excess > worst {
            worst = excess;
            witness = ratio[key].1.as_ref().map(|s| Witness {
                form: key.to_string(),
                t: s.t,
                u: s.u,
                lambda: s.a.clone(),
                lambda_bar: s.b.clone(),
            });
        }
    };
    for key in ["b", "sigma", "f", "phi"] {
        consider(ratio[key].0 - problem.lipschitz, key);
    }
    consider(ratio["sigma_z"].0 - problem.l_sigma, "sigma_z");
    let mut fitted: BTreeMap<String, f64> =
        ratio.iter().map(|(k, v)| (format!("K_{k}"), v.0)).collect();
    fitted.insert("K".into(), k_fit);
    fitted.insert("L_sigma".into(), ratio["sigma_z"].0);
    fitted.insert("L".into(), ratio["growth"].0);
    fitted.remove("K_sigma_z");
    fitted.remove("K_growth");
    let mut failed_constraints = Vec::new();
    if !problem.sigma_depends_on_z && ratio["sigma_z"].0 > VIOLATION_TOLERANCE {
        failed_constraints.push("sigma declared independent of z but varies with z".to_string());
    }
    let passed = worst <= VIOLATION_TOLERANCE && failed_constraints.is_empty();
    Ok(ValidationReport {
        assumption: "lipschitz".into(),
        samples,
        worst_violation: worst,
        witness,
        fitted,
        failed_constraints,
        passed,
    })
}

/// Maximum number of halvings tried by [`contraction_step_bound`].
pub const MAX_HALVINGS: u32 = 20;
/// Contraction ratio an admissible step must certify.
pub const CONTRACTION_TARGET: f64 = 0.5;

/// Largest `delta_init * 2^-k` at which the one-step Picard iteration at
/// `x_probe` (for every control) certifies a contraction ratio of at most 1/2.
pub fn contraction_step_bound(
    problem: &ControlProblem,
    probe_terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    x_probe: &[f64],
    delta_init: f64,
) -> Result<f64> {
    if !(delta_init.is_finite() && delta_init > 0.0) {
        return Err(Error::input(format!(
            "delta_init must be positive, got {delta_init}"
        )));
    }
    if x_probe.len() != problem.n {
        return Err(Error::Dimension {
            what: "x_probe",
            expected: problem.n,
            actual: x_probe.len(),
        });
    }
    let lattice = NoiseLattice::trinomial(problem.d);
    let opts = OneStepOptions {
        tolerance: 1e-10,
        max_iter: 60,
    };
    let mut delta = delta_init;
    for _ in 0..=MAX_HALVINGS {
        let admissible = problem.control_set.iter().all(|&u| {
            match one_step_solve(
                problem,
                0.0,
                x_probe,
                delta,
                u,
                probe_terminal,
                &lattice,
                &opts,
            ) {
                Ok(sol) => sol.contraction_ratio <= CONTRACTION_TARGET,
                Err(_) => false,
            }
        });
        if admissible {
            return Ok(delta);
        }
        delta *= 0.5;
    }
    Err(Error::NonContractiveProblem {
        delta_init,
        smallest: delta * 2.0,
    })
}
