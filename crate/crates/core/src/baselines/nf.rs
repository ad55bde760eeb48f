//! The deterministic limit `g = 0`: a stack of residual layers
//! `x_{i+1} = x_i + f(x_i, t_i) dt_i` with exact change-of-variables likelihood.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::dynamics::TimeGrid;
use crate::error::{Error, Result};
use crate::evaluation::prior_draws;
use crate::field::Field;
use crate::model::Model;
use crate::training::loss::gaussian_nll_rows;
use crate::training::AdjointResult;

fn euler_layer(x: ArrayView2<'_, f64>, f: &Array2<f64>, dt: f64) -> Array2<f64> {
    let mut next = x.to_owned();
    next.scaled_add(dt, f);
    next
}

/// Per-row step matrices `I + dt J_f(x, t)` assembled from `d` reverse-mode
/// probes; `jacobian_rows[k][(r, i)] = d f_k / d x_i`.
pub fn step_jacobians(drift: &Field, x: ArrayView2<'_, f64>, t: f64, dt: f64) -> Vec<DMatrix<f64>> {
    let (rows, d) = x.dim();
    let probes: Vec<Array2<f64>> = (0..d)
        .map(|k| {
            let mut e = Array2::zeros((rows, d));
            e.column_mut(k).fill(1.0);
            drift.vjp_batch(x, t, e.view(), None)
        })
        .collect();
    (0..rows)
        .map(|r| {
            DMatrix::from_fn(
                d,
                d,
                |k, i| if k == i { 1.0 } else { 0.0 } + dt * probes[k][(r, i)],
            )
        })
        .collect()
}

/// Exact NLL of each row under the discrete flow: `-log N(x_N; 0, I) -
/// sum_i log|det(I + dt_i J_f(x_i))|`.
pub fn nf_mode_nll(x: ArrayView2<'_, f64>, grid: &TimeGrid, model: &Model) -> Result<Vec<f64>> {
    if x.ncols() != model.dim() {
        return Err(Error::contract(format!(
            "data has {} columns, model expects {}",
            x.ncols(),
            model.dim()
        )));
    }
    let mut logdet = vec![0.0; x.nrows()];
    let mut state = x.to_owned();
    for i in 0..grid.steps() {
        let t = grid.times()[i];
        let dt = grid.deltas()[i];
        for (r, m) in step_jacobians(&model.drift, state.view(), t, dt)
            .into_iter()
            .enumerate()
        {
            let det = m.determinant();
            if det == 0.0 || !det.is_finite() {
                return Err(Error::SingularJacobian { step: i });
            }
            logdet[r] += det.abs().ln();
        }
        let f = model.drift.eval_batch(state.view(), t);
        state = euler_layer(state.view(), &f, dt);
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("flow layer {i}"),
            });
        }
    }
    Ok(gaussian_nll_rows(state.view())
        .into_iter()
        .zip(logdet)
        .map(|(p, l)| p - l)
        .collect())
}

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_MAX_HALVINGS: usize = 40;
const NEWTON_TOL: f64 = 1e-10;

/// Per-row `max_k |x + dt f(x) - y|_k / (1 + |y|_k)`.
fn layer_residuals(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    drift: &Field,
    t: f64,
    dt: f64,
) -> (Array2<f64>, Vec<f64>) {
    let mut res = euler_layer(x, &drift.eval_batch(x, t), dt);
    res -= &y;
    let scaled = res
        .outer_iter()
        .zip(y.outer_iter())
        .map(|(r, v)| {
            r.iter()
                .zip(v)
                .fold(0.0_f64, |m, (a, b)| m.max(a.abs() / (1.0 + b.abs())))
        })
        .collect();
    (res, scaled)
}

/// Runs the flow backwards from `z`: layer `i` is inverted by solving
/// `x + dt_i f(x, t_i) = y` with damped Newton started at `y - dt_i f(y, t_i)`.
/// A row's step is halved until its residual decreases. A row whose layer has
/// no preimage reachable this way (the layer is not invertible there) is
/// reported as diverged at that layer.
pub fn nf_invert(z: ArrayView2<'_, f64>, grid: &TimeGrid, model: &Model) -> Result<Array2<f64>> {
    if z.ncols() != model.dim() {
        return Err(Error::contract(format!(
            "latent has {} columns, model expects {}",
            z.ncols(),
            model.dim()
        )));
    }
    let drift = &model.drift;
    let mut y = z.to_owned();
    for i in (0..grid.steps()).rev() {
        let t = grid.times()[i];
        let dt = grid.deltas()[i];
        let mut x = euler_layer(y.view(), &drift.eval_batch(y.view(), t), -dt);
        let (mut res, mut err) = layer_residuals(x.view(), y.view(), drift, t, dt);
        for _ in 0..NEWTON_MAX_ITERS {
            if let Some(r) = err.iter().position(|e| !e.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("inverting flow layer {i}, row {r}"),
                });
            }
            if err.iter().all(|&e| e <= NEWTON_TOL) {
                break;
            }
            let mut delta = Array2::zeros(x.raw_dim());
            for (r, m) in step_jacobians(drift, x.view(), t, dt)
                .into_iter()
                .enumerate()
            {
                if err[r] <= NEWTON_TOL {
                    continue;
                }
                let rhs = nalgebra::DVector::from_iterator(res.ncols(), res.row(r).iter().copied());
                let step = m
                    .lu()
                    .solve(&rhs)
                    .ok_or(Error::SingularJacobian { step: i })?;
                delta
                    .row_mut(r)
                    .iter_mut()
                    .zip(step.iter())
                    .for_each(|(d, s)| *d = *s);
            }
            let mut active: Vec<usize> = (0..x.nrows()).filter(|&r| err[r] > NEWTON_TOL).collect();
            let mut scale = 1.0;
            for _ in 0..NEWTON_MAX_HALVINGS {
                let mut trial = x.select(Axis(0), &active);
                trial.scaled_add(-scale, &delta.select(Axis(0), &active));
                let y_act = y.select(Axis(0), &active);
                let (trial_res, trial_err) =
                    layer_residuals(trial.view(), y_act.view(), drift, t, dt);
                let mut still = Vec::new();
                for (k, &r) in active.iter().enumerate() {
                    if trial_err[k] < err[r] {
                        x.row_mut(r).assign(&trial.row(k));
                        res.row_mut(r).assign(&trial_res.row(k));
                        err[r] = trial_err[k];
                    } else {
                        still.push(r);
                    }
                }
                if still.is_empty() {
                    break;
                }
                active = still;
                scale *= 0.5;
            }
        }
        if let Some(r) = err.iter().position(|&e| e > NEWTON_TOL) {
            return Err(Error::Diverged { sample: r, step: i });
        }
        y = x;
    }
    Ok(y)
}

/// `n` exact samples of the discrete flow from standard Gaussian latents.
pub fn nf_sample(n: usize, grid: &TimeGrid, model: &Model, seed: u64) -> Result<Array2<f64>> {
    nf_invert(prior_draws(n, model.dim(), seed).view(), grid, model)
}

/// Batch-mean NLL of the discrete flow and its parameter gradient. The
/// log-determinant terms are differentiated through the exact network
/// Jacobian, so this uses second derivatives of the drift.
pub fn nf_loss_gradient(
    x: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
) -> Result<AdjointResult> {
    let (rows, d) = x.dim();
    let n = grid.steps();
    let mut states = Vec::with_capacity(n + 1);
    states.push(x.to_owned());
    for i in 0..n {
        let f = model.drift.eval_batch(states[i].view(), grid.times()[i]);
        let next = euler_layer(states[i].view(), &f, grid.deltas()[i]);
        if let Some(r) = next
            .rows()
            .into_iter()
            .position(|row| row.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                sample: r,
                step: i + 1,
            });
        }
        states.push(next);
    }
    let prior_sum: f64 = gaussian_nll_rows(states[n].view()).iter().sum();
    let mut logdet_sum = 0.0;
    let mut grad_f = vec![0.0; model.drift.num_params()];
    let mut a = states[n].clone();
    for i in (0..n).rev() {
        let xi = states[i].view();
        let t = grid.times()[i];
        let dt = grid.deltas()[i];
        let fj = model.drift.jacobian_batch(xi, t);
        // jac_cot[k][(r, j)] pairs with d f_j / d x_k
        let mut jac_cot: Vec<Array2<f64>> = (0..d).map(|_| Array2::zeros((rows, d))).collect();
        for r in 0..rows {
            let m = DMatrix::from_fn(
                d,
                d,
                |j, k| if j == k { 1.0 } else { 0.0 } + dt * fj.jac[k][(r, j)],
            );
            let lu = m.lu();
            let det = lu.determinant();
            if det == 0.0 || !det.is_finite() {
                return Err(Error::SingularJacobian { step: i });
            }
            logdet_sum += det.abs().ln();
            let inv = lu
                .try_inverse()
                .ok_or(Error::SingularJacobian { step: i })?;
            // d(-log|det M|)/dM = -M^{-T}; M_{jk} = delta_jk + dt df_j/dx_k
            for j in 0..d {
                for k in 0..d {
                    jac_cot[k][(r, j)] = -dt * inv[(k, j)];
                }
            }
        }
        let out_cot = a.mapv(|v| v * dt);
        let gx = model
            .drift
            .jacobian_backward(xi, t, &fj, out_cot.view(), &jac_cot, &mut grad_f);
        Zip::from(&mut a).and(&gx).for_each(|a, &g| *a += g);
    }
    let inv = 1.0 / rows as f64;
    let mut grad = grad_f;
    grad.resize(model.num_params(), 0.0);
    grad.iter_mut().for_each(|g| *g *= inv);
    let res = AdjointResult {
        loss: (prior_sum - logdet_sum) * inv,
        prior_term: prior_sum * inv,
        noise_term: -logdet_sum * inv,
        grad,
    };
    if !res.loss.is_finite() || res.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "flow gradient".into(),
        });
    }
    Ok(res)
}

/// Negative log density of `x` under the Gaussian that a linear forward
/// chain `x_{i+1} = (I + A dt_i) x_i + g sqrt(dt_i) eps` carries exactly onto
/// `N(0, I)`. This is the trajectory objective when the backward conditionals
/// match the forward posteriors; at `g = 0` it is the discrete flow NLL.
pub fn posterior_matched_objective(
    x: ArrayView2<'_, f64>,
    a: &[f64],
    grid: &TimeGrid,
    g: f64,
) -> Result<Vec<f64>> {
    let d = x.ncols();
    if a.len() != d * d {
        return Err(Error::contract(
            "drift matrix does not match data dimension",
        ));
    }
    let am = DMatrix::from_row_slice(d, d, a);
    let eye = DMatrix::<f64>::identity(d, d);
    let mut sigma = eye.clone();
    for i in (0..grid.steps()).rev() {
        let dt = grid.deltas()[i];
        let f = &eye + &am * dt;
        let finv = f
            .clone()
            .try_inverse()
            .ok_or(Error::SingularJacobian { step: i })?;
        sigma = &finv * (sigma - &eye * (g * g * dt)) * finv.transpose();
    }
    let chol = sigma.clone().cholesky().ok_or_else(|| Error::NonFinite {
        context: "matched covariance is not positive definite".into(),
    })?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let c = 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet);
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let v = nalgebra::DVector::from_iterator(d, row.iter().copied());
            let sol = chol.solve(&v);
            0.5 * v.dot(&sol) + c
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DiffusionSchedule;
    use crate::nn::{Mlp, MlpSpec};
    use ndarray::array;

    fn flow(drift: Field) -> Model {
        let d = drift.dim();
        Model::new(drift, Field::zero(d), DiffusionSchedule::Constant(0.0), 1.0).unwrap()
    }

    #[test]
    fn zero_drift_is_standard_normal() {
        let grid = TimeGrid::fixed(5, 1.0, 1.0).unwrap();
        let x = array![[0.3, -1.2], [0.0, 0.0]];
        let nll = nf_mode_nll(x.view(), &grid, &flow(Field::zero(2))).unwrap();
        let expect = gaussian_nll_rows(x.view());
        assert_eq!(nll, expect);
    }

    #[test]
    fn linear_drift_log_det_matches_closed_form() {
        let a = [-0.7, 0.3, 0.2, -1.1];
        let grid = TimeGrid::fixed(4, 1.0, 0.9).unwrap();
        let model = flow(Field::linear(2, a.to_vec()).unwrap());
        let x = array![[0.4, 0.9]];
        let nll = nf_mode_nll(x.view(), &grid, &model).unwrap()[0];
        let mut state = [0.4, 0.9];
        let mut logdet = 0.0;
        for &dt in grid.deltas() {
            let m = [1.0 + a[0] * dt, a[1] * dt, a[2] * dt, 1.0 + a[3] * dt];
            logdet += (m[0] * m[3] - m[1] * m[2]).abs().ln();
            state = [
                m[0] * state[0] + m[1] * state[1],
                m[2] * state[0] + m[3] * state[1],
            ];
        }
        let expect = 0.5 * (state[0].powi(2) + state[1].powi(2))
            + (2.0 * std::f64::consts::PI).ln()
            - logdet;
        assert!((nll - expect).abs() < 1e-12, "{nll} vs {expect}");
    }

    #[test]
    fn inverse_undoes_the_layers_of_a_network_flow() {
        let mut mlp = Mlp::new(MlpSpec::new(2, vec![16, 16], 8), 5).unwrap();
        for v in mlp.params_mut().values_mut() {
            *v *= 0.5;
        }
        let model = flow(Field::Net(mlp));
        let grid = TimeGrid::fixed(6, 0.5, 0.9).unwrap();
        let x = array![[0.3, -1.2], [1.5, 0.4], [-0.7, 0.0]];
        let mut z = x.clone();
        for i in 0..grid.steps() {
            let t = grid.times()[i];
            let f = model.drift.eval_batch(z.view(), t);
            z = euler_layer(z.view(), &f, grid.deltas()[i]);
        }
        let back = nf_invert(z.view(), &grid, &model).unwrap();
        let err = (&back - &x).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "round trip error {err}");
    }

    #[test]
    fn linear_flow_inverse_matches_matrix_solve() {
        let a = [-0.7, 0.3, 0.2, -1.1];
        let grid = TimeGrid::fixed(3, 1.0, 1.0).unwrap();
        let model = flow(Field::linear(2, a.to_vec()).unwrap());
        let z = array![[0.8, -0.4]];
        let x = nf_invert(z.view(), &grid, &model).unwrap();
        let mut state = [0.8, -0.4];
        for &dt in grid.deltas().iter().rev() {
            let m = [1.0 + a[0] * dt, a[1] * dt, a[2] * dt, 1.0 + a[3] * dt];
            let det = m[0] * m[3] - m[1] * m[2];
            state = [
                (m[3] * state[0] - m[1] * state[1]) / det,
                (m[0] * state[1] - m[2] * state[0]) / det,
            ];
        }
        assert!((x[(0, 0)] - state[0]).abs() < 1e-12 && (x[(0, 1)] - state[1]).abs() < 1e-12);
    }

    #[test]
    fn nf_sample_is_seed_deterministic() {
        let model = flow(Field::scaled_identity(2, -0.5));
        let grid = TimeGrid::fixed(4, 1.0, 1.0).unwrap();
        let a = nf_sample(10, &grid, &model, 3).unwrap();
        assert_eq!(a, nf_sample(10, &grid, &model, 3).unwrap());
        assert_ne!(a, nf_sample(10, &grid, &model, 4).unwrap());
    }

    #[test]
    fn singular_step_is_reported_with_index() {
        let grid = TimeGrid::from_deltas(&[0.5, 1.0]).unwrap();
        let model = flow(Field::scaled_identity(2, -1.0));
        let err = nf_mode_nll(array![[1.0, 1.0]].view(), &grid, &model).unwrap_err();
        assert!(
            matches!(err, Error::SingularJacobian { step: 1 }),
            "{err:?}"
        );
    }

    #[test]
    fn matched_objective_at_zero_noise_is_the_flow_nll() {
        let a = [-0.5, 0.2, -0.1, -0.8];
        let grid = TimeGrid::fixed(6, 1.0, 1.0).unwrap();
        let x = array![[0.3, -0.4], [1.5, 0.7]];
        let lhs = posterior_matched_objective(x.view(), &a, &grid, 0.0).unwrap();
        let rhs = nf_mode_nll(
            x.view(),
            &grid,
            &flow(Field::linear(2, a.to_vec()).unwrap()),
        )
        .unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(2, vec![6, 5], 4);
        let mut net = Mlp::new(spec, 9).unwrap();
        for (i, v) in net.params_mut().values_mut().iter_mut().enumerate() {
            *v += 0.3 * (((i * 37) % 17) as f64 / 17.0 - 0.5);
        }
        let model = flow(Field::Net(net));
        let grid = TimeGrid::fixed(3, 0.5, 1.0).unwrap();
        let x = array![[0.2, -0.5], [1.0, 0.4], [-0.7, 0.1]];
        let res = nf_loss_gradient(x.view(), &grid, &model).unwrap();
        let mean_nll =
            |m: &Model| nf_mode_nll(x.view(), &grid, m).unwrap().iter().sum::<f64>() / 3.0;
        assert!((res.loss - mean_nll(&model)).abs() < 1e-12);
        let p0 = model.params_flat();
        let h = 1e-6;
        for j in (0..p0.len()).step_by(3) {
            let mut m = model.clone();
            let mut p = p0.clone();
            p[j] += h;
            m.set_params_flat(&p).unwrap();
            let up = mean_nll(&m);
            p[j] -= 2.0 * h;
            m.set_params_flat(&p).unwrap();
            let down = mean_nll(&m);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - res.grad[j]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {j}: {fd} vs {}",
                res.grad[j]
            );
        }
    }
}
