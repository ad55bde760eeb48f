use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};

use super::grid::TimeGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, domain, StreamRng};

/// Where the forward noise of a batch comes from: row `r` uses stream
/// `first_index + r` of the family `(seed, FORWARD_NOISE, round)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSource {
    pub seed: u64,
    pub round: u64,
    pub first_index: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            round: 0,
            first_index: 0,
        }
    }

    pub fn row_streams(&self, rows: usize, dom: u64) -> Vec<StreamRng> {
        (0..rows)
            .map(|r| rng::stream(self.seed, dom, self.round, self.first_index + r as u64))
            .collect()
    }

    pub fn offset(&self, rows: usize) -> Self {
        Self {
            first_index: self.first_index + rows as u64,
            ..*self
        }
    }
}

/// Cached forward trajectories of a batch: `states[i]` is `x_i` (rows x d),
/// `forward_noises[i]` the unit Gaussian used for the step `x_i -> x_{i+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub forward_noises: Vec<Array2<f64>>,
    pub grid: TimeGrid,
    /// Diffusion coefficient at every grid node.
    pub g: Vec<f64>,
}

/// Backward innovations `delta_b[i]` for the steps `x_{i+1} -> x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardNoise {
    pub delta_b: Vec<Array2<f64>>,
}

impl BackwardNoise {
    /// Per-row `sum_i |delta_b_i|^2 / 2`.
    pub fn half_sq_norms(&self) -> Vec<f64> {
        let rows = self.delta_b.first().map_or(0, |d| d.nrows());
        let mut out = vec![0.0; rows];
        for d in &self.delta_b {
            for (o, row) in out.iter_mut().zip(d.rows()) {
                *o += 0.5 * row.dot(&row);
            }
        }
        out
    }
}

impl Trajectory {
    pub fn rows(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("non-empty trajectory")
    }

    /// Largest deviation from the forward update over all steps; zero up to
    /// rounding for trajectories produced by [`sample_forward_trajectory`].
    pub fn consistency_error(&self, model: &Model) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.steps() {
            let next = forward_update(
                self.states[i].view(),
                &model
                    .drift
                    .eval_batch(self.states[i].view(), self.grid.times()[i]),
                self.g[i],
                self.grid.deltas()[i],
                self.forward_noises[i].view(),
            );
            Zip::from(&next)
                .and(&self.states[i + 1])
                .for_each(|a, b| worst = worst.max((a - b).abs()));
        }
        worst
    }

    pub fn check_against(&self, grid: &TimeGrid) -> Result<()> {
        if self.states.len() != grid.steps() + 1 || self.forward_noises.len() != grid.steps() {
            return Err(Error::contract(format!(
                "trajectory has {} states for a grid of {} steps",
                self.states.len(),
                grid.steps()
            )));
        }
        Ok(())
    }

    /// Debug dump of one row: `step,t,x_1..x_d,delta_f_1..delta_f_d`.
    /// Row `i` lists `x_i` and the noise that produced it (empty at step 0).
    pub fn write_csv(&self, row: usize, mut out: impl Write) -> std::io::Result<()> {
        let d = self.dim();
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((1..=d).map(|k| format!("x_{k}")));
        header.extend((1..=d).map(|k| format!("delta_f_{k}")));
        writeln!(out, "{}", header.join(","))?;
        for i in 0..=self.steps() {
            let mut fields = vec![i.to_string(), format!("{}", self.grid.times()[i])];
            fields.extend(self.states[i].row(row).iter().map(|v| format!("{v}")));
            if i == 0 {
                fields.extend((0..d).map(|_| String::new()));
            } else {
                fields.extend(
                    self.forward_noises[i - 1]
                        .row(row)
                        .iter()
                        .map(|v| format!("{v}")),
                );
            }
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn forward_update(
    x: ArrayView2<'_, f64>,
    f: &Array2<f64>,
    g: f64,
    dt: f64,
    noise: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let scale = g * dt.sqrt();
    let mut next = x.to_owned();
    Zip::from(&mut next)
        .and(f)
        .and(noise)
        .for_each(|x, &f, &n| *x += f * dt + scale * n);
    next
}

fn first_non_finite_row(a: &Array2<f64>) -> Option<usize> {
    a.rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Simulates the forward process from each row of `x0`.
pub fn sample_forward_trajectory(
    x0: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    noise: NoiseSource,
) -> Result<Trajectory> {
    if let Some(r) = first_non_finite_row(&x0.to_owned()) {
        return Err(Error::Diverged {
            sample: noise.first_index as usize + r,
            step: 0,
        });
    }
    let rows = x0.nrows();
    let d = x0.ncols();
    let g = model.schedule.on_grid(grid);
    let mut streams = noise.row_streams(rows, domain::FORWARD_NOISE);
    let mut states = Vec::with_capacity(grid.steps() + 1);
    let mut noises = Vec::with_capacity(grid.steps());
    states.push(x0.to_owned());
    for i in 0..grid.steps() {
        let mut eps = Array2::zeros((rows, d));
        for (mut row, s) in eps.rows_mut().into_iter().zip(streams.iter_mut()) {
            rng::fill_normal(s, row.as_slice_mut().expect("contiguous"));
        }
        let x = states[i].view();
        let f = model.drift.eval_batch(x, grid.times()[i]);
        let next = forward_update(x, &f, g[i], grid.deltas()[i], eps.view());
        if let Some(r) = first_non_finite_row(&next) {
            return Err(Error::Diverged {
                sample: noise.first_index as usize + r,
                step: i + 1,
            });
        }
        states.push(next);
        noises.push(eps);
    }
    Ok(Trajectory {
        states,
        forward_noises: noises,
        grid: grid.clone(),
        g,
    })
}

/// Backward innovations that make the backward update replay `traj` exactly.
pub fn reconstruct_backward_noise(traj: &Trajectory, model: &Model) -> Result<BackwardNoise> {
    let grid = &traj.grid;
    let mut delta_b = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let g_next = traj.g[i + 1];
        if g_next == 0.0 {
            return Err(Error::ZeroDiffusion { node: i + 1 });
        }
        delta_b.push(backward_noise_batch(
            traj.states[i].view(),
            traj.states[i + 1].view(),
            model,
            grid.times()[i + 1],
            g_next,
            grid.deltas()[i],
        ));
    }
    Ok(BackwardNoise { delta_b })
}

pub(crate) fn backward_noise_batch(
    x: ArrayView2<'_, f64>,
    x_next: ArrayView2<'_, f64>,
    model: &Model,
    t_next: f64,
    g_next: f64,
    dt: f64,
) -> Array2<f64> {
    let f = model.drift.eval_batch(x_next, t_next);
    let s = model.score.eval_batch(x_next, t_next);
    let g2 = g_next * g_next;
    let inv = 1.0 / (g_next * dt.sqrt());
    let mut out = x.to_owned();
    Zip::from(&mut out)
        .and(x_next)
        .and(&f)
        .and(&s)
        .for_each(|o, &xn, &f, &s| *o = (*o - xn + (f - g2 * s) * dt) * inv);
    out
}

/// Replays the backward update with the given innovations starting from the
/// terminal state; returns the reconstructed `x_0 .. x_N`.
pub fn replay_backward(
    traj: &Trajectory,
    model: &Model,
    noise: &BackwardNoise,
) -> Vec<Array2<f64>> {
    let grid = &traj.grid;
    let n = grid.steps();
    let mut out = vec![Array2::zeros((0, 0)); n + 1];
    out[n] = traj.terminal().clone();
    for i in (0..n).rev() {
        let x_next = out[i + 1].view();
        let t = grid.times()[i + 1];
        let f = model.drift.eval_batch(x_next, t);
        let s = model.score.eval_batch(x_next, t);
        let g = traj.g[i + 1];
        let dt = grid.deltas()[i];
        let scale = g * dt.sqrt();
        let mut x = x_next.to_owned();
        Zip::from(&mut x)
            .and(&f)
            .and(&s)
            .and(&noise.delta_b[i])
            .for_each(|x, &f, &s, &e| *x += -(f - g * g * s) * dt + scale * e);
        out[i] = x;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DiffusionSchedule;
    use crate::field::Field;
    use ndarray::array;

    fn zero_model(g: f64) -> Model {
        Model::new(
            Field::zero(2),
            Field::zero(2),
            DiffusionSchedule::constant(g).unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_limit_is_explicit_euler() {
        let drift = Field::linear(2, vec![-1.0, 0.5, 0.0, -2.0]).unwrap();
        let model = Model::new(
            drift.clone(),
            Field::zero(2),
            DiffusionSchedule::Constant(0.0),
            1.0,
        )
        .unwrap();
        let grid = TimeGrid::fixed(5, 1.0, 0.9).unwrap();
        let traj = sample_forward_trajectory(
            array![[1.0, 2.0]].view(),
            &grid,
            &model,
            NoiseSource::new(3),
        )
        .unwrap();
        let mut x = vec![1.0, 2.0];
        for i in 0..5 {
            let f = drift.eval(&x, grid.times()[i]);
            for k in 0..2 {
                x[k] += f[k] * grid.deltas()[i];
            }
        }
        assert_eq!(traj.terminal().row(0).to_vec(), x);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let grid = TimeGrid::fixed(6, 1.0, 0.9).unwrap();
        let model = zero_model(1.0);
        let x0 = array![[0.0, 0.0], [1.0, -1.0]];
        let a = sample_forward_trajectory(x0.view(), &grid, &model, NoiseSource::new(11)).unwrap();
        let b = sample_forward_trajectory(x0.view(), &grid, &model, NoiseSource::new(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.forward_noises.len(), 6);
        assert_eq!(a.consistency_error(&model), 0.0);
    }

    #[test]
    fn rows_do_not_depend_on_batch_composition() {
        let grid = TimeGrid::fixed(4, 1.0, 1.0).unwrap();
        let model = zero_model(1.0);
        let x0 = array![[0.0, 0.0], [1.0, -1.0], [2.0, 2.0]];
        let full =
            sample_forward_trajectory(x0.view(), &grid, &model, NoiseSource::new(4)).unwrap();
        let tail = sample_forward_trajectory(
            x0.slice(ndarray::s![1.., ..]),
            &grid,
            &model,
            NoiseSource::new(4).offset(1),
        )
        .unwrap();
        assert_eq!(full.terminal().row(2), tail.terminal().row(1));
    }

    #[test]
    fn zero_fields_give_negated_forward_noise() {
        let grid = TimeGrid::fixed(5, 1.0, 0.9).unwrap();
        let model = zero_model(1.7);
        let traj = sample_forward_trajectory(
            array![[0.5, 0.5]].view(),
            &grid,
            &model,
            NoiseSource::new(2),
        )
        .unwrap();
        let bn = reconstruct_backward_noise(&traj, &model).unwrap();
        for i in 0..5 {
            for k in 0..2 {
                let a = bn.delta_b[i][(0, k)];
                let b = -traj.forward_noises[i][(0, k)];
                assert!((a - b).abs() < 1e-12, "step {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_diffusion_is_rejected() {
        let grid = TimeGrid::fixed(3, 1.0, 1.0).unwrap();
        let model = zero_model(0.0);
        let traj = sample_forward_trajectory(
            array![[0.5, 0.5]].view(),
            &grid,
            &model,
            NoiseSource::new(2),
        )
        .unwrap();
        assert!(matches!(
            reconstruct_backward_noise(&traj, &model),
            Err(Error::ZeroDiffusion { node: 1 })
        ));
    }

    #[test]
    fn divergence_reports_sample_and_step() {
        let drift = Field::scaled_identity(1, 1e300);
        let model =
            Model::new(drift, Field::zero(1), DiffusionSchedule::Constant(0.0), 1.0).unwrap();
        let grid = TimeGrid::fixed(3, 1.0, 1.0).unwrap();
        let err = sample_forward_trajectory(
            array![[0.0], [1.0]].view(),
            &grid,
            &model,
            NoiseSource::new(0),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Diverged { sample: 1, step: 2 }),
            "{err:?}"
        );
    }

    #[test]
    fn csv_dump_layout() {
        let grid = TimeGrid::fixed(2, 1.0, 1.0).unwrap();
        let model = zero_model(1.0);
        let traj = sample_forward_trajectory(
            array![[0.0, 0.0]].view(),
            &grid,
            &model,
            NoiseSource::new(1),
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(0, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,t,x_1,x_2,delta_f_1,delta_f_2");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,0,0,0,,"));
        assert_eq!(lines[2].split(',').count(), 6);
    }

    #[test]
    fn even_in_noise_sign() {
        let bn = BackwardNoise {
            delta_b: vec![array![[0.3, -1.2]], array![[2.0, 0.1]]],
        };
        let flipped = BackwardNoise {
            delta_b: vec![array![[-0.3, 1.2]], array![[2.0, -0.1]]],
        };
        assert_eq!(bn.half_sq_norms(), flipped.half_sq_norms());
    }
}
