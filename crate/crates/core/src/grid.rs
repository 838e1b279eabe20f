//! Time partitions, truncated space lattices and piecewise-linear interpolation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform one-dimensional space lattice on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceLattice {
    lo: f64,
    hi: f64,
    step: f64,
    nodes: Vec<f64>,
}

impl SpaceLattice {
    /// Lattice with spacing as close to `dx` as the box allows.
    ///
    /// The box width must be an integer multiple of `dx` up to `1e-9` relative error.
    pub fn uniform(lo: f64, hi: f64, dx: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::input(format!("bad lattice box [{lo}, {hi}]")));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::input(format!(
                "lattice step must be positive, got {dx}"
            )));
        }
        let cells_f = (hi - lo) / dx;
        let cells = cells_f.round();
        if cells < 2.0 || (cells - cells_f).abs() > 1e-9 * cells.max(1.0) {
            return Err(Error::input(format!(
                "box width {} is not a multiple of dx = {dx} (need at least 2 cells)",
                hi - lo
            )));
        }
        Ok(Self::with_cells(lo, hi, cells as usize))
    }

    pub fn with_cells(lo: f64, hi: f64, cells: usize) -> Self {
        assert!(cells >= 1 && hi > lo);
        let step = (hi - lo) / cells as f64;
        let nodes = (0..=cells)
            .map(|k| if k == cells { hi } else { lo + k as f64 * step })
            .collect();
        Self {
            lo,
            hi,
            step,
            nodes,
        }
    }

    /// Default truncation box `x_center ± 4 (1 + |x_center|) sqrt(T) sigma_max`.
    pub fn default_box(x_center: f64, horizon: f64, sigma_max: f64, cells: usize) -> Self {
        let half = (4.0 * (1.0 + x_center.abs()) * horizon.sqrt() * sigma_max).max(1e-6);
        Self::with_cells(x_center - half, x_center + half, cells)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Index of the node closest to `x` (clamped to the lattice).
    pub fn nearest(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.step).round();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    /// Same box refined by an integer factor.
    pub fn refined(&self, factor: usize) -> Self {
        Self::with_cells(self.lo, self.hi, (self.len() - 1) * factor)
    }
}

/// Equispaced partition `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::input(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::input("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    /// Smallest partition whose step does not exceed `delta`.
    pub fn with_max_step(horizon: f64, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::input(format!(
                "time step must be positive, got {delta}"
            )));
        }
        let steps = (horizon / delta * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Time partition together with the space lattice every field lives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPair {
    pub time: TimeGrid,
    pub space: Arc<SpaceLattice>,
}

impl GridPair {
    pub fn new(time: TimeGrid, space: SpaceLattice) -> Self {
        Self {
            time,
            space: Arc::new(space),
        }
    }

    /// `[lo, hi]` with step `dx`, horizon `T` with step at most `delta`.
    pub fn build(horizon: f64, delta: f64, lo: f64, hi: f64, dx: f64) -> Result<Self> {
        Ok(Self::new(
            TimeGrid::with_max_step(horizon, delta)?,
            SpaceLattice::uniform(lo, hi, dx)?,
        ))
    }

    pub fn dt(&self) -> f64 {
        self.time.dt()
    }

    pub fn dx(&self) -> f64 {
        self.space.step()
    }
}

/// Piecewise-linear interpolant of lattice samples, extended linearly past the box.
#[derive(Debug, Clone, Copy)]
pub struct Interpolant<'a> {
    lattice: &'a SpaceLattice,
    values: &'a [f64],
}

impl<'a> Interpolant<'a> {
    pub fn new(lattice: &'a SpaceLattice, values: &'a [f64]) -> Self {
        assert_eq!(lattice.len(), values.len(), "interpolant sample count");
        Self { lattice, values }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let l = self.lattice;
        let last = l.len() - 2;
        let s = (x - l.lo) / l.step;
        // floor, then clamp so the outermost cell is reused for extrapolation
        let k = if s <= 0.0 {
            0
        } else {
            (s.floor() as usize).min(last)
        };
        let w = (x - l.nodes[k]) / l.step;
        self.values[k] + w * (self.values[k + 1] - self.values[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_shape() {
        let l = SpaceLattice::uniform(-2.0, 2.0, 0.02).unwrap();
        assert_eq!(l.len(), 201);
        assert_eq!(l.nodes()[0], -2.0);
        assert_eq!(l.nodes()[200], 2.0);
        assert!(l.nodes()[100].abs() < 1e-14);
        assert!(SpaceLattice::uniform(-2.0, 2.0, 0.03).is_err());
        assert!(SpaceLattice::uniform(1.0, -1.0, 0.1).is_err());
        assert_eq!(l.refined(2).len(), 401);
    }

    #[test]
    fn time_grid_steps() {
        let g = TimeGrid::with_max_step(0.25, 1e-3).unwrap();
        assert_eq!(g.steps(), 250);
        assert_eq!(g.time(250), 0.25);
        assert!(TimeGrid::with_max_step(0.25, 0.3).unwrap().steps() == 1);
        assert!(TimeGrid::new(0.0, 3).is_err());
    }

    #[test]
    fn interpolation_is_exact_for_affine_data_inside_and_outside() {
        let l = SpaceLattice::uniform(-1.0, 1.0, 0.25).unwrap();
        let v: Vec<f64> = l.nodes().iter().map(|x| 3.0 * x - 0.5).collect();
        let f = Interpolant::new(&l, &v);
        for &x in &[-3.0, -1.0, -0.3, 0.0, 0.61, 1.0, 2.5] {
            assert!((f.eval(x) - (3.0 * x - 0.5)).abs() < 1e-13, "x = {x}");
        }
    }

    #[test]
    fn interpolation_hits_nodes() {
        let l = SpaceLattice::uniform(0.0, 1.0, 0.1).unwrap();
        let v: Vec<f64> = l.nodes().iter().map(|x| (5.0 * x).sin()).collect();
        let f = Interpolant::new(&l, &v);
        for (x, y) in l.nodes().iter().zip(&v) {
            assert!((f.eval(*x) - y).abs() < 1e-15);
        }
    }
}
