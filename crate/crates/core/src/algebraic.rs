//! The pointwise algebraic equation `z = zeta + a sigma1(z)`.
//!
//! For `a >= 0` and `sigma1` one-sided monotone in `z`, the equation has a unique
//! solution. It is reached by continuation in `a`: with `N` levels
//! `a_k = k a / N` chosen so that `(a / N) lip_z <= 1/2`, the solution map `S_k`
//! of level `k` is obtained from `S_{k-1}` as the fixed point of
//!
//! ```text
//! z  <-  S_{k-1}(zeta + (a / N) sigma1(z))
//! ```
//!
//! which contracts with factor at most 1/2 because `S_{k-1}` is nonexpansive.
//! Level 1 is a plain Picard iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ControlProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicConfig {
    /// Bound on the residual `|z - zeta - a sigma1(z)|`.
    pub tolerance: f64,
    /// Iteration budget of each fixed-point loop.
    pub max_iter: usize,
    /// Target contraction factor `(a / N) lip_z` of one continuation level.
    pub level_contraction: f64,
}

impl Default for AlgebraicConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iter: 200,
            level_contraction: 0.5,
        }
    }
}

impl AlgebraicConfig {
    fn check(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::input("algebraic tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::input("algebraic max_iter must be at least 1"));
        }
        if !(self.level_contraction > 0.0 && self.level_contraction < 1.0) {
            return Err(Error::input("level contraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicSolution {
    pub z: Vec<f64>,
    /// `|z - zeta - a sigma1(z)|`, recomputed after the final iterate.
    pub residual: f64,
    /// Continuation levels `N`.
    pub levels: usize,
    /// `sigma1` evaluations spent in fixed-point loops.
    pub iterations: usize,
}

/// Closure writing `sigma1(z)` (length `d`) into its second argument.
pub type Sigma1<'a> = &'a dyn Fn(&[f64], &mut [f64]);

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `|z - zeta - a sigma1(z)|`
pub fn algebraic_residual(a: f64, sigma1: Sigma1<'_>, zeta: &[f64], z: &[f64]) -> f64 {
    let mut s = vec![0.0; z.len()];
    sigma1(z, &mut s);
    z.iter()
        .zip(zeta)
        .zip(&s)
        .map(|((z, c), s)| (z - c - a * s).powi(2))
        .sum::<f64>()
        .sqrt()
}

struct Continuation<'a> {
    sigma1: Sigma1<'a>,
    step: f64,
    max_iter: usize,
    iterations: usize,
}

impl Continuation<'_> {
    /// Solves `z = zeta + k step sigma1(z)` starting from `z`, in place.
    fn solve_level(&mut self, k: usize, zeta: &[f64], z: &mut [f64], tol: f64) -> Result<f64> {
        let d = z.len();
        let ak = k as f64 * self.step;
        let mut s = vec![0.0; d];
        let mut shifted = vec![0.0; d];
        let mut residual = f64::INFINITY;
        for _ in 0..self.max_iter {
            (self.sigma1)(z, &mut s);
            self.iterations += 1;
            residual = z
                .iter()
                .zip(zeta)
                .zip(&s)
                .map(|((z, c), s)| (z - c - ak * s).powi(2))
                .sum::<f64>()
                .sqrt();
            if residual <= tol {
                return Ok(residual);
            }
            if !residual.is_finite() {
                break;
            }
            if k == 1 {
                for i in 0..d {
                    z[i] = zeta[i] + self.step * s[i];
                }
            } else {
                for i in 0..d {
                    shifted[i] = zeta[i] + self.step * s[i];
                }
                // inner levels must land below this level's target, down to rounding
                let scale = 1.0 + norm(z) + norm(&shifted);
                let inner = (0.25 * tol).max(8.0 * f64::EPSILON * scale);
                self.solve_level(k - 1, &shifted, z, inner)?;
            }
        }
        Err(Error::NonConvergence {
            residual,
            iterations: self.iterations,
            location: None,
        })
    }
}

/// Solves `z = zeta + a sigma1(z)`, where `lip_z` bounds the Lipschitz constant of
/// `sigma1`.
pub fn solve_pointwise(
    a: f64,
    sigma1: Sigma1<'_>,
    zeta: &[f64],
    lip_z: f64,
    config: &AlgebraicConfig,
) -> Result<AlgebraicSolution> {
    config.check()?;
    if !(a.is_finite() && a >= 0.0) {
        return Err(Error::input(format!(
            "algebraic coefficient must be nonnegative, got {a}"
        )));
    }
    if !(lip_z.is_finite() && lip_z >= 0.0) {
        return Err(Error::input(format!(
            "lip_z must be nonnegative, got {lip_z}"
        )));
    }
    if a == 0.0 {
        return Ok(AlgebraicSolution {
            z: zeta.to_vec(),
            residual: 0.0,
            levels: 0,
            iterations: 0,
        });
    }
    let levels = 1 + (a * lip_z / config.level_contraction).floor() as usize;
    let mut run = Continuation {
        sigma1,
        step: a / levels as f64,
        max_iter: config.max_iter,
        iterations: 0,
    };
    let mut z = zeta.to_vec();
    for k in 1..=levels {
        run.solve_level(k, zeta, &mut z, config.tolerance)?;
    }
    let residual = algebraic_residual(a, sigma1, zeta, &z);
    Ok(AlgebraicSolution {
        z,
        residual,
        levels,
        iterations: run.iterations,
    })
}

/// Spatial gradient `(s, x, out)` of the test function.
pub type Gradient<'a> = &'a dyn Fn(f64, &[f64], &mut [f64]);

/// The representation `z = h(s, x_bar, y, zeta)` of the solution of
/// `z = zeta + Dphi(s, x_bar) sigma(s, x_bar, y + phi(s, x_bar), z)`.
///
/// The gradient must be a nonnegative multiple `a G` of the row `G`; the
/// equation then reduces to `z = zeta + a G sigma(.., z)`.
#[allow(clippy::too_many_arguments)]
pub fn h_representation(
    problem: &ControlProblem,
    s: f64,
    x_bar: &[f64],
    y: f64,
    zeta: &[f64],
    dphi: Gradient<'_>,
    phi: &dyn Fn(f64, &[f64]) -> f64,
    config: &AlgebraicConfig,
) -> Result<AlgebraicSolution> {
    let (n, d) = (problem.n, problem.d);
    if x_bar.len() != n {
        return Err(Error::Dimension {
            what: "x_bar",
            expected: n,
            actual: x_bar.len(),
        });
    }
    if zeta.len() != d {
        return Err(Error::Dimension {
            what: "zeta",
            expected: d,
            actual: zeta.len(),
        });
    }
    if problem.sigma_depends_on_u {
        return Err(Error::input(
            "algebraic coupling needs sigma independent of the control",
        ));
    }
    let mut grad = vec![0.0; n];
    dphi(s, x_bar, &mut grad);
    let g = &problem.g;
    let g2: f64 = g.iter().map(|v| v * v).sum();
    let a = g.iter().zip(&grad).map(|(g, p)| g * p).sum::<f64>() / g2;
    let off: f64 = grad.iter().zip(g).map(|(p, g)| (p - a * g).abs()).sum();
    if off > 1e-12 * (1.0 + norm(&grad)) {
        return Err(Error::input("gradient must be aligned with G"));
    }
    let y_shift = y + phi(s, x_bar);
    let sigma1 = |z: &[f64], out: &mut [f64]| {
        let mut sig = vec![0.0; n * d];
        problem.diffusion(s, x_bar, y_shift, z, 0.0, &mut sig);
        for (k, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|i| g[i] * sig[i * d + k]).sum();
        }
    };
    let lip = problem.l_sigma * g2.sqrt();
    solve_pointwise(a, &sigma1, zeta, lip, config)
}
