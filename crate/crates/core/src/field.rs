//! Sampled value fields and their CSV/JSON dumps.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::grid::{Interpolant, SpaceLattice};
use crate::report::SolveReport;

/// `W(t_i, .)` on the space lattice, optionally with the companion `V(t_i, .)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueField {
    pub index: usize,
    pub time: f64,
    pub lattice: Arc<SpaceLattice>,
    pub values: Vec<f64>,
    /// Companion gradient variable (HJB with algebraic coupling only).
    pub companion: Option<Vec<f64>>,
    /// Nodewise algebraic residual of the companion.
    pub residual: Option<Vec<f64>>,
    pub report: SolveReport,
}

impl ValueField {
    pub fn new(index: usize, time: f64, lattice: Arc<SpaceLattice>, values: Vec<f64>) -> Self {
        Self {
            index,
            time,
            lattice,
            values,
            companion: None,
            residual: None,
            report: SolveReport::default(),
        }
    }

    pub fn interpolant(&self) -> Interpolant<'_> {
        Interpolant::new(&self.lattice, &self.values)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.interpolant().eval(x)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fields ordered by increasing time, `fields[i].time = t_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSequence {
    pub fields: Vec<ValueField>,
    pub report: SolveReport,
}

impl FieldSequence {
    pub fn first(&self) -> &ValueField {
        &self.fields[0]
    }

    pub fn last(&self) -> &ValueField {
        self.fields.last().expect("non-empty field sequence")
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Long-format CSV: `t,x,W[,V,residual]`, one row per node and slice.
    ///
    /// `header` lines are written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        let companion = self.fields.iter().any(|f| f.companion.is_some());
        if companion {
            writeln!(out, "t,x,W,V,residual")?;
        } else {
            writeln!(out, "t,x,W")?;
        }
        for f in &self.fields {
            for (k, x) in f.lattice.nodes().iter().enumerate() {
                write!(out, "{},{},{}", f.time, x, f.values[k])?;
                if companion {
                    let v = f.companion.as_ref().map_or(f64::NAN, |c| c[k]);
                    let r = f.residual.as_ref().map_or(f64::NAN, |c| c[k]);
                    write!(out, ",{v},{r}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    /// Wide-format CSV for plotting: `x,W@t0,W@t1,...`.
    pub fn write_plot_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "x")?;
        for f in &self.fields {
            write!(out, ",W@{}", f.time)?;
        }
        writeln!(out)?;
        let lattice = &self.first().lattice;
        for (k, x) in lattice.nodes().iter().enumerate() {
            write!(out, "{x}")?;
            for f in &self.fields {
                write!(out, ",{}", f.values[k])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}
