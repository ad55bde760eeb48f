//! Reference gradients for the adjoint recursion: the whole simulated
//! trajectory unrolled on a scalar tape, and central finite differences.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::dynamics::{sample_forward_trajectory, DiffusionSchedule, NoiseSource, TimeGrid};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::Model;
use crate::nn::{Mlp, MlpSpec};
use crate::rng::{self, domain};
use crate::training::{adjoint_gradient, loss};

fn dense<'t>(w: &[Var<'t>], b: &[Var<'t>], input: &[Var<'t>]) -> Vec<Var<'t>> {
    let fan_in = input.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            let mut acc = bj;
            for (i, &xi) in input.iter().enumerate() {
                acc = acc + w[j * fan_in + i] * xi;
            }
            acc
        })
        .collect()
}

/// Network forward pass written directly against the parameter layout.
fn tape_net<'t>(net: &Mlp, p: &[Var<'t>], x: &[Var<'t>], t: f64) -> Vec<Var<'t>> {
    let seg = |name: &str| &p[net.params().segment(name).expect("segment").range()];
    let freq = seg("time.freq");
    let phase = seg("time.phase");
    let angles: Vec<Var<'t>> = freq.iter().zip(phase).map(|(&f, &ph)| f * t + ph).collect();
    let emb: Vec<Var<'t>> = angles
        .iter()
        .map(|a| a.sin())
        .chain(angles.iter().map(|a| a.cos()))
        .collect();
    let mut h: Vec<Var<'t>> = dense(seg("embed.weight"), seg("embed.bias"), x)
        .into_iter()
        .zip(emb)
        .map(|(a, e)| a + e)
        .collect();
    for l in 0..net.spec().hidden_widths.len() {
        h = dense(
            seg(&format!("hidden{l}.weight")),
            seg(&format!("hidden{l}.bias")),
            &h,
        )
        .into_iter()
        .map(|z| z.silu())
        .collect();
    }
    dense(seg("out.weight"), seg("out.bias"), &h)
}

fn tape_field<'t>(
    tape: &'t Tape,
    field: &Field,
    p: &[Var<'t>],
    x: &[Var<'t>],
    t: f64,
) -> Vec<Var<'t>> {
    match field {
        Field::Zero { dim } => (0..*dim).map(|_| tape.var(0.0)).collect(),
        Field::Linear { dim, matrix } => (0..*dim)
            .map(|i| {
                let mut acc = tape.var(0.0);
                for k in 0..*dim {
                    acc = acc + x[k] * matrix[i * dim + k];
                }
                acc
            })
            .collect(),
        Field::OuScore(s) => {
            let m = s.mean_at(t);
            let v = s.var_at(t);
            x.iter()
                .zip(&m)
                .map(|(&xi, &mi)| xi.shift(-mi) * (-1.0 / v))
                .collect()
        }
        Field::Net(net) => tape_net(net, p, x, t),
    }
}

/// Batch-mean loss and parameter gradient by differentiating the unrolled
/// simulation `x_0 -> x_N` and the reconstructed backward innovations with a
/// scalar tape. Uses the same forward noises a trajectory would draw from `noise`.
pub fn unrolled_gradient(
    x0: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    noise: NoiseSource,
) -> Result<(f64, Vec<f64>)> {
    let reference = sample_forward_trajectory(x0, grid, model, noise)?;
    let g = model.schedule.on_grid(grid);
    if let Some(node) = (1..g.len()).find(|&k| !(g[k] > 0.0)) {
        return Err(Error::ZeroDiffusion { node });
    }
    let d = model.dim();
    let nd = model.drift.num_params();
    let rows = x0.nrows();
    let mut total_loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for r in 0..rows {
        let tape = Tape::new();
        let pf: Vec<Var> = model.drift.params().iter().map(|&v| tape.var(v)).collect();
        let ps: Vec<Var> = model.score.params().iter().map(|&v| tape.var(v)).collect();
        let mut xs: Vec<Vec<Var>> = vec![x0.row(r).iter().map(|&v| tape.var(v)).collect()];
        for i in 0..grid.steps() {
            let t = grid.times()[i];
            let dt = grid.deltas()[i];
            let f = tape_field(&tape, &model.drift, &pf, &xs[i], t);
            let next = (0..d)
                .map(|k| {
                    xs[i][k] + f[k] * dt + g[i] * dt.sqrt() * reference.forward_noises[i][(r, k)]
                })
                .collect();
            xs.push(next);
        }
        let n = grid.steps();
        let mut l = tape.var(0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        for k in 0..d {
            l = l + xs[n][k].square() * 0.5;
        }
        for i in 0..n {
            let t1 = grid.times()[i + 1];
            let dt = grid.deltas()[i];
            let g1 = g[i + 1];
            let f1 = tape_field(&tape, &model.drift, &pf, &xs[i + 1], t1);
            let s1 = tape_field(&tape, &model.score, &ps, &xs[i + 1], t1);
            for k in 0..d {
                let db = (xs[i][k] - xs[i + 1][k] + (f1[k] - s1[k] * (g1 * g1)) * dt)
                    * (1.0 / (g1 * dt.sqrt()));
                l = l + db.square() * 0.5;
            }
        }
        let adj = tape.gradient(l);
        total_loss += l.value();
        for (j, v) in pf.iter().chain(&ps).enumerate() {
            grad[j] += adj[v.index()];
        }
        debug_assert_eq!(pf.len(), nd);
    }
    let inv = 1.0 / rows as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok((total_loss * inv, grad))
}

/// Central difference of the batch loss along parameter `j`.
pub fn finite_difference(
    x0: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    noise: NoiseSource,
    j: usize,
    h: f64,
) -> Result<f64> {
    let mut m = model.clone();
    let mut p = model.params_flat();
    let base = p[j];
    p[j] = base + h;
    m.set_params_flat(&p)?;
    let up = loss(x0, grid, &m, noise)?.total;
    p[j] = base - h;
    m.set_params_flat(&p)?;
    let down = loss(x0, grid, &m, noise)?.total;
    Ok((up - down) / (2.0 * h))
}

pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// A randomly perturbed problem: nets with non-zero output layers, a random
/// diffusion level and a few data rows.
pub struct GradcheckInstance {
    pub model: Model,
    pub x0: Array2<f64>,
    pub grid: TimeGrid,
    pub noise: NoiseSource,
}

pub fn random_instance(
    dims: usize,
    steps: usize,
    seed: u64,
    zero_nets: bool,
) -> Result<GradcheckInstance> {
    let mut r = rng::stream(seed, domain::GRADCHECK, 0, 0);
    let widths = [8usize, 16, 24];
    let depth = r.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth)
        .map(|_| widths[r.random_range(0..widths.len())])
        .collect();
    let spec = MlpSpec::new(dims, hidden, 8);
    let g = r.random_range(0.5..1.5);
    let horizon = r.random_range(0.3..1.0);
    let (drift, score) = if zero_nets {
        (Field::zero(dims), Field::zero(dims))
    } else {
        let mut nets = Vec::new();
        for k in 0..2u64 {
            let mut net = Mlp::new(spec.clone(), rng::key(seed, domain::GRADCHECK, k + 1))?;
            for v in net.params_mut().values_mut() {
                *v += r.random_range(-0.3..0.3);
            }
            nets.push(Field::Net(net));
        }
        let score = nets.pop().expect("score");
        (nets.pop().expect("drift"), score)
    };
    let model = Model::new(drift, score, DiffusionSchedule::constant(g)?, horizon)?;
    let grid = if steps >= 2 && r.random_bool(0.5) {
        TimeGrid::flexible(steps, horizon, 0.9, &mut r)?
    } else {
        TimeGrid::fixed(steps, horizon, 0.9)?
    };
    let rows = 3;
    let mut x0 = Array2::zeros((rows, dims));
    rng::fill_normal(&mut r, x0.as_slice_mut().expect("contiguous"));
    Ok(GradcheckInstance {
        model,
        x0,
        grid,
        noise: NoiseSource::new(seed),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub dims: usize,
    pub steps: usize,
    pub seed: u64,
    pub num_params: usize,
    /// Relative L2 error of the adjoint gradient against the unrolled tape gradient.
    pub oracle_error: f64,
    /// Relative L2 error against central differences on the probed coordinates.
    pub fd_error: f64,
    pub fd_coords: usize,
    pub loss_gap: f64,
}

/// Tolerance on [`GradcheckReport::oracle_error`] for a pass.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.oracle_error <= ORACLE_TOLERANCE && self.loss_gap <= 1e-10
    }
}

pub fn run_gradcheck(
    dims: usize,
    steps: usize,
    seed: u64,
    zero_nets: bool,
    fd_coords: usize,
) -> Result<GradcheckReport> {
    let inst = random_instance(dims, steps, seed, zero_nets)?;
    let traj = sample_forward_trajectory(inst.x0.view(), &inst.grid, &inst.model, inst.noise)?;
    let adj = adjoint_gradient(&traj, &inst.model)?;
    let (oracle_loss, oracle) =
        unrolled_gradient(inst.x0.view(), &inst.grid, &inst.model, inst.noise)?;
    let np = inst.model.num_params();
    let mut r = rng::stream(seed, domain::GRADCHECK, 1, 0);
    let coords: Vec<usize> = if np == 0 {
        Vec::new()
    } else {
        (0..fd_coords).map(|_| r.random_range(0..np)).collect()
    };
    let mut fd = Vec::with_capacity(coords.len());
    let mut ad = Vec::with_capacity(coords.len());
    for &j in &coords {
        fd.push(finite_difference(
            inst.x0.view(),
            &inst.grid,
            &inst.model,
            inst.noise,
            j,
            1e-5,
        )?);
        ad.push(adj.grad[j]);
    }
    Ok(GradcheckReport {
        dims,
        steps,
        seed,
        num_params: np,
        oracle_error: relative_l2(&adj.grad, &oracle),
        fd_error: relative_l2(&ad, &fd),
        fd_coords: coords.len(),
        loss_gap: (adj.loss - oracle_loss).abs() / oracle_loss.abs().max(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_network_matches_production_forward() {
        let inst = random_instance(3, 4, 5, false).unwrap();
        let Field::Net(net) = &inst.model.drift else {
            panic!()
        };
        let tape = Tape::new();
        let p: Vec<Var> = net.params().values().iter().map(|&v| tape.var(v)).collect();
        let x: Vec<Var> = [0.3, -0.2, 1.1].iter().map(|&v| tape.var(v)).collect();
        let out = tape_net(net, &p, &x, 0.37);
        let prod = net.forward(&[0.3, -0.2, 1.1], 0.37);
        for (a, b) in out.iter().zip(&prod) {
            assert!((a.value() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_instance_agrees_with_both_references() {
        let rep = run_gradcheck(2, 5, 17, false, 10).unwrap();
        assert!(rep.oracle_error <= 1e-10, "{rep:?}");
        assert!(rep.fd_error <= 1e-4, "{rep:?}");
        assert!(rep.passed());
    }

    #[test]
    fn zero_nets_pass_trivially() {
        let rep = run_gradcheck(2, 4, 1, true, 20).unwrap();
        assert_eq!(rep.num_params, 0);
        assert_eq!(rep.fd_coords, 0);
        assert!(rep.passed());
    }

    #[test]
    fn reports_are_reproducible() {
        assert_eq!(
            run_gradcheck(2, 3, 9, false, 4).unwrap(),
            run_gradcheck(2, 3, 9, false, 4).unwrap()
        );
    }
}
