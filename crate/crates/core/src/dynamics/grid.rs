use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    Fixed,
    Flexible,
    /// Built from explicit step sizes (e.g. a DDPM beta sequence).
    Explicit,
}

impl GridMode {
    pub fn name(self) -> &'static str {
        match self {
            GridMode::Fixed => "fixed",
            GridMode::Flexible => "flexible",
            GridMode::Explicit => "explicit",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(GridMode::Fixed),
            "flexible" => Ok(GridMode::Flexible),
            other => Err(Error::config(format!(
                "grid_mode must be `fixed` or `flexible`, got `{other}`"
            ))),
        }
    }
}

/// Discretization `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    deltas: Vec<f64>,
    beta: f64,
    mode: GridMode,
}

fn check_args(n: usize, horizon: f64, beta: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::config("number of steps must be at least 1"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::config(format!(
            "horizon T must be positive, got {horizon}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!(
            "grid exponent beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

impl TimeGrid {
    /// `t_i = (i / N)^beta * T`.
    pub fn fixed(n: usize, horizon: f64, beta: f64) -> Result<Self> {
        check_args(n, horizon, beta)?;
        let mut times: Vec<f64> = (0..=n)
            .map(|i| (i as f64 / n as f64).powf(beta) * horizon)
            .collect();
        times[n] = horizon;
        Ok(Self::assemble(times, beta, GridMode::Fixed))
    }

    /// Endpoints pinned; interior `t_i` uniform on
    /// `[((i-1)/(N-1))^beta T, (i/(N-1))^beta T]`.
    pub fn flexible<R: Rng + ?Sized>(
        n: usize,
        horizon: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_args(n, horizon, beta)?;
        if n < 2 {
            return Err(Error::config("flexible grids need at least 2 steps"));
        }
        let edge = |i: usize| (i as f64 / (n - 1) as f64).powf(beta) * horizon;
        let mut times = Vec::with_capacity(n + 1);
        times.push(0.0);
        for i in 1..n {
            let (lo, hi) = (edge(i - 1), edge(i));
            let prev = *times.last().expect("t_0");
            // endpoints of the intervals have probability zero; redraw to stay strict
            let t = loop {
                let u: f64 = rng.random();
                let t = lo + u * (hi - lo);
                if t > prev && t < horizon {
                    break t;
                }
            };
            times.push(t);
        }
        times.push(horizon);
        Ok(Self::assemble(times, beta, GridMode::Flexible))
    }

    /// Grid whose step sizes are `deltas` (the DDPM convention `dt_i = beta_i`).
    pub fn from_deltas(deltas: &[f64]) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::config("step size sequence must be non-empty"));
        }
        if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::config("step sizes must be positive and finite"));
        }
        let mut times = Vec::with_capacity(deltas.len() + 1);
        let mut t = 0.0;
        times.push(t);
        for d in deltas {
            t += d;
            times.push(t);
        }
        let mut grid = Self::assemble(times, 1.0, GridMode::Explicit);
        grid.deltas = deltas.to_vec();
        Ok(grid)
    }

    /// Grid from explicit node times; must start at 0 and increase strictly.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::config(
                "grid must start at 0 and have at least two nodes",
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("grid times must be strictly increasing"));
        }
        Ok(Self::assemble(times, 1.0, GridMode::Explicit))
    }

    fn assemble(times: Vec<f64>, beta: f64, mode: GridMode) -> Self {
        let deltas = times.windows(2).map(|w| w[1] - w[0]).collect();
        Self {
            times,
            deltas,
            beta,
            mode,
        }
    }

    pub fn steps(&self) -> usize {
        self.deltas.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_schedule() {
        let g = TimeGrid::fixed(4, 1.0, 1.0).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.steps(), 4);
    }

    #[test]
    fn power_schedule_first_node() {
        let g = TimeGrid::fixed(10, 0.05, 0.9).unwrap();
        assert_eq!(g.times()[1], 0.1f64.powf(0.9) * 0.05);
        assert_eq!(g.horizon(), 0.05);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(TimeGrid::fixed(0, 1.0, 1.0).is_err());
        assert!(TimeGrid::fixed(3, 0.0, 1.0).is_err());
        assert!(TimeGrid::fixed(3, 1.0, -1.0).is_err());
        let mut r = rng::stream(1, 0, 0, 0);
        assert!(TimeGrid::flexible(1, 1.0, 1.0, &mut r).is_err());
        assert!(TimeGrid::flexible(4, -1.0, 1.0, &mut r).is_err());
        assert!(TimeGrid::from_deltas(&[0.1, 0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn flexible_endpoints_pinned_and_deterministic() {
        let a = TimeGrid::flexible(2, 3.0, 0.9, &mut rng::stream(5, 0, 0, 0)).unwrap();
        let b = TimeGrid::flexible(2, 3.0, 0.9, &mut rng::stream(5, 0, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times()[0], 0.0);
        assert_eq!(a.times()[2], 3.0);
        assert!(a.times()[1] > 0.0 && a.times()[1] < 3.0);
    }

    #[test]
    fn flexible_nodes_fall_in_their_intervals() {
        let mut r = rng::stream(9, 0, 0, 0);
        for _ in 0..200 {
            let g = TimeGrid::flexible(7, 2.0, 0.9, &mut r).unwrap();
            for i in 1..7 {
                let lo = ((i - 1) as f64 / 6.0).powf(0.9) * 2.0;
                let hi = (i as f64 / 6.0).powf(0.9) * 2.0;
                assert!(g.times()[i] >= lo && g.times()[i] <= hi);
            }
            assert!(g.deltas().iter().all(|d| *d > 0.0));
        }
    }

    #[test]
    fn deltas_telescope_to_horizon() {
        let mut r = rng::stream(2, 0, 0, 0);
        for n in [1usize, 2, 7, 30, 100] {
            let f = TimeGrid::fixed(n, 0.7, 0.9).unwrap();
            let s: f64 = f.deltas().iter().sum();
            assert!(((s - 0.7) / 0.7).abs() <= 1e-15, "fixed n={n}: {s}");
            if n >= 2 {
                let g = TimeGrid::flexible(n, 0.7, 0.9, &mut r).unwrap();
                let s: f64 = g.deltas().iter().sum();
                assert!(((s - 0.7) / 0.7).abs() <= 1e-15, "flexible n={n}: {s}");
            }
        }
    }

    #[test]
    fn flexible_interior_mean() {
        // N = 3, beta = 1, T = 1: t_1 ~ U[0, 1/2] with mean 1/4 and sd 1/sqrt(48)
        let mut r = rng::stream(3, 0, 0, 0);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| TimeGrid::flexible(3, 1.0, 1.0, &mut r).unwrap().times()[1])
            .sum::<f64>()
            / n as f64;
        let se = (1.0f64 / 48.0).sqrt() / (n as f64).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * se, "mean {mean}");
    }
}
