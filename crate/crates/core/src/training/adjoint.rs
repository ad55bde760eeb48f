use ndarray::{Array2, Zip};

use super::loss::gaussian_nll_rows;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::model::Model;

/// Batch-mean loss and its gradient with respect to the flat model
/// parameters (drift first, then score).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub loss: f64,
    pub prior_term: f64,
    pub noise_term: f64,
    pub grad: Vec<f64>,
}

/// Reverse recursion over cached states.
///
/// Walking nodes `k = N..0`, `a_k` is the total derivative of the loss with
/// respect to `x_k` (downstream states held as functions of `x_k`). Node `k`
/// enters the loss through `f(x_k)` in the forward step leaving it, through
/// `f(x_k)` and `s(x_k)` in the backward innovation `delta_b_{k-1}`, and
/// directly through `delta_b_k` and `delta_b_{k-1}`. Only the activations of
/// node `k` are alive at any time.
pub fn adjoint_gradient(traj: &Trajectory, model: &Model) -> Result<AdjointResult> {
    let n = traj.steps();
    if traj.states.len() != n + 1 || traj.forward_noises.len() != n || traj.g.len() != n + 1 {
        return Err(Error::contract("trajectory does not match its grid"));
    }
    if traj.dim() != model.dim() {
        return Err(Error::contract(format!(
            "trajectory dimension {} differs from model dimension {}",
            traj.dim(),
            model.dim()
        )));
    }
    if let Some(node) = (1..=n).find(|&k| !(traj.g[k] > 0.0)) {
        return Err(Error::ZeroDiffusion { node });
    }
    let rows = traj.rows();
    let times = traj.grid.times();
    let deltas = traj.grid.deltas();
    let mut grad_f = vec![0.0; model.drift.num_params()];
    let mut grad_s = vec![0.0; model.score.num_params()];
    let prior_sum: f64 = gaussian_nll_rows(traj.terminal().view()).iter().sum();
    let mut noise_sum = 0.0;

    // a_{k+1} and u_k = delta_b_k / (g_{k+1} sqrt(dt_k)) from the previous node
    let mut a_next: Option<Array2<f64>> = None;
    let mut u_next: Option<Array2<f64>> = None;
    for k in (0..=n).rev() {
        let xk = traj.states[k].view();
        let t = times[k];
        let fe = model.drift.eval_cached(xk, t);
        let mut cot_f = Array2::zeros((rows, traj.dim()));
        let mut a = match (&a_next, &u_next) {
            (Some(a1), Some(u1)) => a1 + u1,
            _ => traj.terminal().clone(),
        };
        if let Some(a1) = &a_next {
            cot_f.scaled_add(deltas[k], a1);
        }
        let mut s_part = None;
        if k >= 1 {
            let se = model.score.eval_cached(xk, t);
            let g = traj.g[k];
            let dt = deltas[k - 1];
            let g2 = g * g;
            let scale = 1.0 / (g * dt.sqrt());
            let mut u = traj.states[k - 1].to_owned();
            Zip::from(&mut u)
                .and(xk)
                .and(fe.output())
                .and(se.output())
                .for_each(|u, &x, &f, &s| *u = (*u - x + (f - g2 * s) * dt) * scale);
            noise_sum += 0.5 * u.iter().map(|v| v * v).sum::<f64>();
            u.mapv_inplace(|v| v * scale);
            cot_f.scaled_add(dt, &u);
            let cot_s = u.mapv(|v| -g2 * dt * v);
            a -= &u;
            s_part = Some((se, cot_s));
            u_next = Some(u);
        } else {
            u_next = None;
        }
        let jf = model
            .drift
            .backward_cached(xk, t, &fe, cot_f.view(), Some(&mut grad_f));
        a += &jf;
        if let Some((se, cot_s)) = s_part {
            let js = model
                .score
                .backward_cached(xk, t, &se, cot_s.view(), Some(&mut grad_s));
            a += &js;
        }
        a_next = Some(a);
    }

    let inv = 1.0 / rows as f64;
    let mut grad = grad_f;
    grad.extend_from_slice(&grad_s);
    grad.iter_mut().for_each(|g| *g *= inv);
    let result = AdjointResult {
        loss: (prior_sum + noise_sum) * inv,
        prior_term: prior_sum * inv,
        noise_term: noise_sum * inv,
        grad,
    };
    if !result.loss.is_finite() || result.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "adjoint gradient".into(),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_forward_trajectory, DiffusionSchedule, NoiseSource, TimeGrid};
    use crate::field::Field;
    use crate::training::loss::trajectory_loss;

    #[test]
    fn parameter_free_fields_give_empty_gradient() {
        let model = Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::constant(1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::fixed(6, 1.0, 0.9).unwrap();
        let x0 = Array2::from_shape_fn((4, 2), |(r, c)| r as f64 - c as f64);
        let traj =
            sample_forward_trajectory(x0.view(), &grid, &model, NoiseSource::new(8)).unwrap();
        let res = adjoint_gradient(&traj, &model).unwrap();
        assert!(res.grad.is_empty());
        let lb = trajectory_loss(&traj, &model).unwrap();
        assert!((res.loss - lb.total).abs() < 1e-12);
        assert!((res.prior_term - lb.prior_term).abs() < 1e-12);
    }

    #[test]
    fn mismatched_trajectory_is_a_contract_violation() {
        let model = Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::constant(1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::fixed(3, 1.0, 1.0).unwrap();
        let mut traj = sample_forward_trajectory(
            Array2::zeros((1, 2)).view(),
            &grid,
            &model,
            NoiseSource::new(1),
        )
        .unwrap();
        traj.states.pop();
        assert!(matches!(
            adjoint_gradient(&traj, &model),
            Err(Error::Contract(_))
        ));
    }
}
