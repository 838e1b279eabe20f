//! Convergence diagnostics attached to every solver output.

use serde::{Deserialize, Serialize};

/// Aggregated diagnostics of a solve (one slice or a whole run).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Number of one-step FBSDE fixed-point solves.
    pub one_step_solves: u64,
    pub total_iterations: u64,
    pub max_iterations: usize,
    /// Largest last-three-iterate contraction ratio observed.
    pub max_contraction_ratio: f64,
    /// Largest final fixed-point update.
    pub max_final_update: f64,
    /// Successor states that left the truncation box.
    pub extrapolations: u64,
    pub algebraic_solves: u64,
    pub algebraic_iterations: u64,
    pub max_algebraic_residual: f64,
    /// Nodes where a negative discrete gradient was clamped to zero.
    pub clamped_nodes: u64,
    /// Nodes where a gradient was taken (denominator of the clamp fraction).
    pub gradient_nodes: u64,
    /// Explicit finite-difference steps taken.
    pub pde_steps: u64,
    /// Largest `dt * sigma^2 / dx^2` met while stepping.
    pub max_cfl_number: f64,
}

impl SolveReport {
    pub fn merge(&mut self, other: &SolveReport) {
        self.one_step_solves += other.one_step_solves;
        self.total_iterations += other.total_iterations;
        self.max_iterations = self.max_iterations.max(other.max_iterations);
        self.max_contraction_ratio = self.max_contraction_ratio.max(other.max_contraction_ratio);
        self.max_final_update = self.max_final_update.max(other.max_final_update);
        self.extrapolations += other.extrapolations;
        self.algebraic_solves += other.algebraic_solves;
        self.algebraic_iterations += other.algebraic_iterations;
        self.max_algebraic_residual = self
            .max_algebraic_residual
            .max(other.max_algebraic_residual);
        self.clamped_nodes += other.clamped_nodes;
        self.gradient_nodes += other.gradient_nodes;
        self.pde_steps += other.pde_steps;
        self.max_cfl_number = self.max_cfl_number.max(other.max_cfl_number);
    }

    pub fn clamp_fraction(&self) -> f64 {
        if self.gradient_nodes == 0 {
            0.0
        } else {
            self.clamped_nodes as f64 / self.gradient_nodes as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_takes_sums_and_maxima() {
        let mut a = SolveReport {
            one_step_solves: 2,
            max_iterations: 5,
            max_contraction_ratio: 0.2,
            clamped_nodes: 1,
            gradient_nodes: 10,
            ..Default::default()
        };
        let b = SolveReport {
            one_step_solves: 3,
            max_iterations: 4,
            max_contraction_ratio: 0.4,
            gradient_nodes: 10,
            ..Default::default()
        };
        a.merge(&b);
        assert_eq!(a.one_step_solves, 5);
        assert_eq!(a.max_iterations, 5);
        assert_eq!(a.max_contraction_ratio, 0.4);
        assert_eq!(a.clamp_fraction(), 0.05);
    }
}
