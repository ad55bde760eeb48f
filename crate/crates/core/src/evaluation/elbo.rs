use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::dynamics::{
    reconstruct_backward_noise, sample_forward_trajectory, NoiseSource, TimeGrid,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, domain};
use crate::training::loss::{check_positive_diffusion, gaussian_nll_rows, log_g_ratio};

/// Monte Carlo estimate of the trajectory bound for one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    pub std_err: f64,
}

/// Upper bound on `-log p(x)` from `n_mc` forward trajectories per point:
/// `E[-log p_B(x_N) - sum log p_B(x_i | x_{i+1}) + sum log p_F(x_{i+1} | x_i)]`
/// with Gaussian conditionals of covariance `g^2 dt I` on both sides.
pub fn elbo_nll_bound(
    x: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<BoundEstimate>> {
    if n_mc == 0 {
        return Err(Error::config(
            "bound needs at least one trajectory per point",
        ));
    }
    if x.ncols() != model.dim() {
        return Err(Error::contract("data does not match model dimension"));
    }
    let g = model.schedule.on_grid(grid);
    check_positive_diffusion(&g)?;
    let ratio = log_g_ratio(&g, model.dim());
    let key = rng::key(seed, domain::ELBO, 0);
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut rep = Array2::zeros((n_mc, x.ncols()));
            rep.rows_mut()
                .into_iter()
                .for_each(|mut r| r.assign(&x.row(i)));
            let noise = NoiseSource {
                seed: key,
                round: i as u64,
                first_index: 0,
            };
            let traj = sample_forward_trajectory(rep.view(), grid, model, noise)?;
            let bn = reconstruct_backward_noise(&traj, model)?;
            let back = bn.half_sq_norms();
            let mut fwd = vec![0.0; n_mc];
            for e in &traj.forward_noises {
                for (o, row) in fwd.iter_mut().zip(e.rows()) {
                    *o += 0.5 * row.dot(&row);
                }
            }
            let vals: Vec<f64> = gaussian_nll_rows(traj.terminal().view())
                .iter()
                .zip(&back)
                .zip(&fwd)
                .map(|((p, b), f)| p + b - f + ratio)
                .collect();
            let m = vals.iter().sum::<f64>() / n_mc as f64;
            let se = if n_mc > 1 {
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((n_mc - 1) * n_mc) as f64)
                    .sqrt()
            } else {
                f64::INFINITY
            };
            Ok(BoundEstimate {
                mean: m,
                std_err: se,
            })
        })
        .collect()
}

/// `(nats + rescale_log_det) / (d ln 2)`, where `rescale_log_det` is the log
/// Jacobian determinant of any preprocessing applied to the raw data.
pub fn bits_per_dim(nats: f64, d: usize, rescale_log_det: f64) -> f64 {
    (nats + rescale_log_det) / (d as f64 * std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DiffusionSchedule;
    use crate::field::Field;
    use ndarray::array;

    #[test]
    fn unit_conversions() {
        assert!((bits_per_dim(3.0 * std::f64::consts::LN_2, 3, 0.0) - 1.0).abs() < 1e-15);
        assert!((bits_per_dim(1.8379, 2, 0.0) - 1.3257).abs() < 1e-4);
        let a: f64 = 4.0;
        let shifted = bits_per_dim(1.0, 2, 2.0 * a.ln());
        assert!((shifted - (1.0 + 2.0 * a.ln()) / (2.0 * std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn pure_noise_bound_matches_closed_form() {
        // f = s = 0: delta_b = -delta_f, so the bound is E[-log N(x + g sqrt(T) z)]
        let g = 0.8;
        let m = Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::constant(g).unwrap(),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::fixed(6, 1.0, 0.9).unwrap();
        let x = array![[0.5, -1.0], [2.0, 0.0]];
        let est = elbo_nll_bound(x.view(), &grid, &m, 20_000, 3).unwrap();
        for (i, e) in est.iter().enumerate() {
            let r2 = x.row(i).dot(&x.row(i));
            let expect = 0.5 * (r2 + 2.0 * g * g) + (2.0 * std::f64::consts::PI).ln();
            assert!(
                (e.mean - expect).abs() < 3.5 * e.std_err,
                "{} vs {expect} (se {})",
                e.mean,
                e.std_err
            );
        }
    }

    #[test]
    fn fixed_seed_is_deterministic_and_zero_g_is_rejected() {
        let m = Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::constant(1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::fixed(3, 1.0, 1.0).unwrap();
        let x = array![[0.1, 0.2]];
        assert_eq!(
            elbo_nll_bound(x.view(), &grid, &m, 50, 1).unwrap(),
            elbo_nll_bound(x.view(), &grid, &m, 50, 1).unwrap()
        );
        let flat = Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::Constant(0.0),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            elbo_nll_bound(x.view(), &grid, &flat, 5, 1),
            Err(Error::ZeroDiffusion { .. })
        ));
    }
}
