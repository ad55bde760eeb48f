use super::grid::TimeGrid;
use crate::error::{Error, Result};

/// Diffusion coefficient `g(t) >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionSchedule {
    Constant(f64),
    /// Piecewise-linear through `(times[i], values[i])`, held flat outside.
    Nodes {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl DiffusionSchedule {
    pub fn constant(g: f64) -> Result<Self> {
        if !(g >= 0.0 && g.is_finite()) {
            return Err(Error::config(format!(
                "diffusion coefficient must be >= 0, got {g}"
            )));
        }
        Ok(DiffusionSchedule::Constant(g))
    }

    /// Per-node values on a grid.
    pub fn on_nodes(grid: &TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.times().len() {
            return Err(Error::config(format!(
                "expected {} node values, got {}",
                grid.times().len(),
                values.len()
            )));
        }
        if values.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config(
                "diffusion coefficients must be >= 0 and finite",
            ));
        }
        Ok(DiffusionSchedule::Nodes {
            times: grid.times().to_vec(),
            values,
        })
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self {
            DiffusionSchedule::Constant(g) => *g,
            DiffusionSchedule::Nodes { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let j = times.partition_point(|&s| s <= t);
                let (t0, t1) = (times[j - 1], times[j]);
                let w = (t - t0) / (t1 - t0);
                values[j - 1] * (1.0 - w) + values[j] * w
            }
        }
    }

    /// `g_0 .. g_N` evaluated at the grid nodes.
    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.times().iter().map(|&t| self.value_at(t)).collect()
    }

    pub fn is_zero(&self) -> bool {
        match self {
            DiffusionSchedule::Constant(g) => *g == 0.0,
            DiffusionSchedule::Nodes { values, .. } => values.iter().all(|v| *v == 0.0),
        }
    }
}
