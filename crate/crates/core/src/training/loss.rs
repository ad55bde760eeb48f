use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::dynamics::{
    reconstruct_backward_noise, sample_forward_trajectory, NoiseSource, TimeGrid, Trajectory,
};
use crate::error::{Error, Result};
use crate::model::Model;

/// Terms that do not enter the gradient but complete the trajectory bound.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConstants {
    /// Batch mean of `sum_i |delta_f_i|^2 / 2`.
    pub forward_noise: f64,
    /// `d ln(g_N / g_0)`: what remains of the two sides' Gaussian
    /// normalizers `-(d/2) ln(2 pi g^2 dt)` after telescoping.
    pub log_g_ratio: f64,
    /// `(d/2) ln(2 pi)`, already included in `prior_term`.
    pub prior_normalizer: f64,
}

/// Batch-mean loss split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Mean of `-log N(x_N; 0, I)`.
    pub prior_term: f64,
    /// Mean of `|delta_b_i|^2 / 2` for every step `i`.
    pub noise_terms: Vec<f64>,
    pub constants: LossConstants,
    /// `prior_term + sum(noise_terms)`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn noise_total(&self) -> f64 {
        self.noise_terms.iter().sum()
    }

    /// Trajectory upper bound on the data NLL, all normalizers included.
    pub fn nll_bound(&self) -> f64 {
        self.total - self.constants.forward_noise + self.constants.log_g_ratio
    }
}

/// `-log N(x; 0, I)` per row.
pub fn gaussian_nll_rows(x: ArrayView2<'_, f64>) -> Vec<f64> {
    let c = 0.5 * x.ncols() as f64 * (2.0 * PI).ln();
    x.rows().into_iter().map(|r| 0.5 * r.dot(&r) + c).collect()
}

pub(crate) fn log_g_ratio(g: &[f64], d: usize) -> f64 {
    d as f64 * (g[g.len() - 1] / g[0]).ln()
}

pub(crate) fn check_positive_diffusion(g: &[f64]) -> Result<()> {
    match g.iter().position(|&v| !(v > 0.0)) {
        Some(node) => Err(Error::ZeroDiffusion { node }),
        None => Ok(()),
    }
}

/// Loss of an already simulated trajectory batch.
pub fn trajectory_loss(traj: &Trajectory, model: &Model) -> Result<LossBreakdown> {
    check_positive_diffusion(&traj.g)?;
    let rows = traj.rows() as f64;
    let d = traj.dim();
    let bn = reconstruct_backward_noise(traj, model)?;
    let mean_half_sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>() * 0.5 / rows;
    let prior_term = gaussian_nll_rows(traj.terminal().view())
        .iter()
        .sum::<f64>()
        / rows;
    let noise_terms: Vec<f64> = bn.delta_b.iter().map(mean_half_sq).collect();
    let forward_noise = traj.forward_noises.iter().map(mean_half_sq).sum();
    let total = prior_term + noise_terms.iter().sum::<f64>();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: "trajectory loss".into(),
        });
    }
    Ok(LossBreakdown {
        prior_term,
        noise_terms,
        constants: LossConstants {
            forward_noise,
            log_g_ratio: log_g_ratio(&traj.g, d),
            prior_normalizer: 0.5 * d as f64 * (2.0 * PI).ln(),
        },
        total,
    })
}

/// Simulates one forward trajectory per row of `batch` and evaluates the loss.
pub fn loss(
    batch: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    noise: NoiseSource,
) -> Result<LossBreakdown> {
    if batch.nrows() == 0 {
        return Err(Error::contract("loss needs a non-empty batch"));
    }
    check_positive_diffusion(&model.schedule.on_grid(grid))?;
    let traj = sample_forward_trajectory(batch, grid, model, noise)?;
    trajectory_loss(&traj, model)
}
