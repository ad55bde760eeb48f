//! Exact likelihood through the probability-flow ODE
//! `dx/dt = f - g^2 s / 2`, with the log-density change `d ell/dt = tr(dv/dx)`
//! integrated alongside by an adaptive Dormand-Prince 5(4) scheme.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, domain};
use crate::training::loss::gaussian_nll_rows;

/// Largest dimension for which [`TraceMethod::Auto`] takes the exact trace.
pub const EXACT_TRACE_MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceMethod {
    /// Exact for `d <= 8`, otherwise Hutchinson with 16 probes.
    Auto,
    Exact,
    /// Rademacher probes; each point is integrated once per probe.
    Hutchinson {
        probes: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeOptions {
    pub atol: f64,
    pub rtol: f64,
    pub trace: TraceMethod,
    pub seed: u64,
    pub max_steps: usize,
    /// Rows integrated together with a shared step size.
    pub chunk_rows: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            atol: 1e-5,
            rtol: 1e-5,
            trace: TraceMethod::Auto,
            seed: 0,
            max_steps: 100_000,
            chunk_rows: 256,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            atol: tol,
            rtol: tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Largest accepted scaled error norm (`<= 1` when tolerances are met).
    pub max_error_norm: f64,
}

impl IntegratorStats {
    fn merge(&mut self, o: &IntegratorStats) {
        self.accepted += o.accepted;
        self.rejected += o.rejected;
        self.max_error_norm = self.max_error_norm.max(o.max_error_norm);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllReport {
    pub nats: Vec<f64>,
    /// Standard error of each estimate (zero for the exact trace).
    pub std_err: Vec<f64>,
    /// Hutchinson probes per point; zero for the exact trace.
    pub probes: usize,
    pub stats: IntegratorStats,
    pub atol: f64,
    pub rtol: f64,
}

impl NllReport {
    pub fn mean(&self) -> f64 {
        self.nats.iter().sum::<f64>() / self.nats.len() as f64
    }
}

// Dormand-Prince tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Augmented right-hand side: columns `0..d` carry `v(x, t)`, column `d`
/// carries `tr(dv/dx)` (exact, or `p^T (dv/dx) p` for a probe row `p`).
fn rhs(model: &Model, y: ArrayView2<'_, f64>, t: f64, probes: Option<&Array2<f64>>) -> Array2<f64> {
    let (rows, cols) = y.dim();
    let d = cols - 1;
    let x = y.slice(s![.., ..d]);
    let g = model.schedule.value_at(t);
    let half_g2 = 0.5 * g * g;
    let fe = model.drift.eval_cached(x, t);
    let se = model.score.eval_cached(x, t);
    let mut out = Array2::zeros((rows, cols));
    {
        let mut v = out.slice_mut(s![.., ..d]);
        Zip::from(&mut v)
            .and(fe.output())
            .and(se.output())
            .for_each(|v, &f, &s| *v = f - half_g2 * s);
    }
    let vjp = |cot: &Array2<f64>| -> Array2<f64> {
        let mut gx = model.drift.backward_cached(x, t, &fe, cot.view(), None);
        if half_g2 != 0.0 {
            let gs = model.score.backward_cached(x, t, &se, cot.view(), None);
            gx.scaled_add(-half_g2, &gs);
        }
        gx
    };
    let mut tr = out.column_mut(d);
    match probes {
        None => {
            for k in 0..d {
                let mut e = Array2::zeros((rows, d));
                e.column_mut(k).fill(1.0);
                let gx = vjp(&e);
                tr += &gx.column(k);
            }
        }
        Some(p) => {
            let gx = vjp(p);
            let dots = (&gx * p).sum_axis(Axis(1));
            tr += &dots;
        }
    }
    out
}

/// Largest phase the fastest time feature may advance within one step. The
/// embedded error estimate aliases on steps spanning many periods, so the
/// step size is capped regardless of tolerance.
const MAX_PHASE_PER_STEP: f64 = std::f64::consts::FRAC_PI_2;

fn error_norm(err: &Array2<f64>, y0: &Array2<f64>, y1: &Array2<f64>, atol: f64, rtol: f64) -> f64 {
    let mut worst: f64 = 0.0;
    Zip::from(err).and(y0).and(y1).for_each(|&e, &a, &b| {
        let sc = atol + rtol * a.abs().max(b.abs());
        worst = worst.max(e.abs() / sc);
    });
    worst
}

struct ChunkResult {
    nll: Vec<f64>,
    stats: IntegratorStats,
}

fn integrate_chunk(
    model: &Model,
    x: ArrayView2<'_, f64>,
    probes: Option<&Array2<f64>>,
    opts: &OdeOptions,
) -> Result<ChunkResult> {
    let (rows, d) = x.dim();
    let horizon = model.horizon;
    let mut y = Array2::zeros((rows, d + 1));
    y.slice_mut(s![.., ..d]).assign(&x);
    let mut t = 0.0;
    let mut k1 = rhs(model, y.view(), t, probes);
    let mut stats = IntegratorStats::default();

    // initial step from the scaled sizes of y and y'
    let scale = |a: &Array2<f64>, base: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        Zip::from(a).and(base).for_each(|&v, &b| {
            let sc = opts.atol + opts.rtol * b.abs();
            acc += (v / sc).powi(2);
        });
        (acc / a.len() as f64).sqrt()
    };
    let d0 = scale(&y, &y);
    let d1 = scale(&k1, &y);
    let omega = model.max_time_frequency();
    let h_max = if omega > 0.0 {
        horizon.min(MAX_PHASE_PER_STEP / omega)
    } else {
        horizon
    };
    let mut h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h = h.min(h_max).max(1e-10 * horizon);

    let finish = |y: &Array2<f64>| -> Vec<f64> {
        let prior = gaussian_nll_rows(y.slice(s![.., ..d]));
        prior
            .iter()
            .zip(y.column(d))
            .map(|(p, acc)| p - acc)
            .collect()
    };

    let mut ks: Vec<Array2<f64>> = Vec::with_capacity(7);
    while t < horizon {
        if stats.accepted + stats.rejected >= opts.max_steps {
            let best = finish(&y);
            return Err(Error::Integrator {
                reason: format!("step budget {} exhausted at t = {t}", opts.max_steps),
                best_effort: best.iter().sum::<f64>() / best.len() as f64,
            });
        }
        let last = t + h >= horizon;
        if last {
            h = horizon - t;
        }
        ks.clear();
        ks.push(k1.clone());
        for stage in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in ks.iter().enumerate() {
                let a = A[stage][j];
                if a != 0.0 {
                    ys.scaled_add(h * a, kj);
                }
            }
            let k = rhs(model, ys.view(), t + C[stage] * h, probes);
            ks.push(k);
        }
        let mut y_new = y.clone();
        let mut err = Array2::zeros(y.raw_dim());
        for j in 0..7 {
            if B5[j] != 0.0 {
                y_new.scaled_add(h * B5[j], &ks[j]);
            }
            let e = B5[j] - B4[j];
            if e != 0.0 {
                err.scaled_add(h * e, &ks[j]);
            }
        }
        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("probability-flow ODE at t = {t}"),
            });
        }
        let en = error_norm(&err, &y, &y_new, opts.atol, opts.rtol);
        if en <= 1.0 {
            t = if last { horizon } else { t + h };
            y = y_new;
            k1 = ks.pop().expect("seven stages");
            stats.accepted += 1;
            stats.max_error_norm = stats.max_error_norm.max(en);
        } else {
            stats.rejected += 1;
        }
        let factor = if en == 0.0 {
            5.0
        } else {
            (0.9 * en.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (h * factor).min(h_max);
        if h < 1e-14 * horizon.max(1.0) {
            let best = finish(&y);
            return Err(Error::Integrator {
                reason: format!("step size underflow at t = {t}"),
                best_effort: best.iter().sum::<f64>() / best.len() as f64,
            });
        }
    }
    Ok(ChunkResult {
        nll: finish(&y),
        stats,
    })
}

fn run_chunks(
    model: &Model,
    x: ArrayView2<'_, f64>,
    probes: Option<&Array2<f64>>,
    opts: &OdeOptions,
) -> Result<(Vec<f64>, IntegratorStats)> {
    let rows = x.nrows();
    let chunk = opts.chunk_rows.max(1);
    let starts: Vec<usize> = (0..rows).step_by(chunk).collect();
    let parts: Vec<Result<ChunkResult>> = starts
        .par_iter()
        .map(|&a| {
            let b = (a + chunk).min(rows);
            let p = probes.map(|p| p.slice(s![a..b, ..]).to_owned());
            integrate_chunk(model, x.slice(s![a..b, ..]), p.as_ref(), opts)
        })
        .collect();
    let mut nll = Vec::with_capacity(rows);
    let mut stats = IntegratorStats::default();
    for p in parts {
        let p = p?;
        nll.extend(p.nll);
        stats.merge(&p.stats);
    }
    Ok((nll, stats))
}

/// Negative log-likelihood of every row of `x` in nats.
pub fn ode_nll(x: ArrayView2<'_, f64>, model: &Model, opts: &OdeOptions) -> Result<NllReport> {
    let (n, d) = x.dim();
    if d != model.dim() {
        return Err(Error::contract(format!(
            "data has {d} columns, model expects {}",
            model.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "ode_nll input".into(),
        });
    }
    let method = match opts.trace {
        TraceMethod::Auto if d <= EXACT_TRACE_MAX_DIM => TraceMethod::Exact,
        TraceMethod::Auto => TraceMethod::Hutchinson { probes: 16 },
        m => m,
    };
    match method {
        TraceMethod::Hutchinson { probes: k } if k > 0 => {
            let mut xs = Array2::zeros((n * k, d));
            let mut ps = Array2::zeros((n * k, d));
            for i in 0..n {
                for j in 0..k {
                    let r = i * k + j;
                    xs.row_mut(r).assign(&x.row(i));
                    let mut st = rng::stream(opts.seed, domain::HUTCHINSON, 0, r as u64);
                    for v in ps.row_mut(r).iter_mut() {
                        *v = rng::rademacher(&mut st);
                    }
                }
            }
            let (vals, stats) = run_chunks(model, xs.view(), Some(&ps), opts)?;
            let mut nats = Vec::with_capacity(n);
            let mut se = Vec::with_capacity(n);
            for i in 0..n {
                let v = &vals[i * k..(i + 1) * k];
                let m = v.iter().sum::<f64>() / k as f64;
                let var = if k > 1 {
                    v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (k - 1) as f64
                } else {
                    0.0
                };
                nats.push(m);
                se.push((var / k as f64).sqrt());
            }
            Ok(NllReport {
                nats,
                std_err: se,
                probes: k,
                stats,
                atol: opts.atol,
                rtol: opts.rtol,
            })
        }
        TraceMethod::Hutchinson { .. } => {
            Err(Error::config("Hutchinson trace needs at least one probe"))
        }
        _ => {
            let (nats, stats) = run_chunks(model, x, None, opts)?;
            Ok(NllReport {
                std_err: vec![0.0; nats.len()],
                nats,
                probes: 0,
                stats,
                atol: opts.atol,
                rtol: opts.rtol,
            })
        }
    }
}
