use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use super::adjoint::{adjoint_gradient, AdjointResult};
use super::checkpoint::{write_train_state, TrainState};
use super::optim::{adam_step, clip_global_norm, ema_update, AdamHyper, AdamState};
use crate::baselines::nf_loss_gradient;
use crate::config::Config;
use crate::dynamics::{sample_forward_trajectory, GridMode, NoiseSource, TimeGrid};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::nn::MlpSpec;
use crate::rng::{self, domain};

/// Rows per gradient work unit. Fixed so that the reduction order, and hence
/// every bit of the result, does not depend on the number of workers.
pub const CHUNK_ROWS: usize = 64;

/// Consecutive failed iterations tolerated before training aborts.
pub const MAX_CONSECUTIVE_FAILURES: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub g: f64,
    pub horizon: f64,
    pub beta: f64,
    pub grid_mode: GridMode,
    /// `(first iteration, N)` pairs; N in force is that of the last
    /// threshold not exceeding the iteration.
    pub progressive_schedule: Vec<(u64, usize)>,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DiffFlow,
            hidden_widths: vec![128, 128, 128],
            time_embed_dim: 32,
            g: 1.0,
            horizon: 0.05,
            beta: 0.9,
            grid_mode: GridMode::Fixed,
            progressive_schedule: vec![(0, 10), (1000, 30)],
            iterations: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            ema_decay: 0.999,
            clip_norm: 100.0,
            seed: 0,
            checkpoint_every: 500,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "hidden_widths",
        "time_embed_dim",
        "g",
        "horizon",
        "beta",
        "grid_mode",
        "progressive_schedule",
        "iterations",
        "batch_size",
        "learning_rate",
        "ema_decay",
        "clip_norm",
        "seed",
        "checkpoint_every",
        "workers",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("`{field}`: {msg}")));
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return bad(
                "hidden_widths",
                "must be a non-empty list of positive widths".into(),
            );
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim", "must be positive and even".into());
        }
        if self.mode != Mode::Nf && !(self.g > 0.0 && self.g.is_finite()) {
            return bad("g", format!("must be positive, got {}", self.g));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon", format!("must be positive, got {}", self.horizon));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be positive, got {}", self.beta));
        }
        if self.progressive_schedule.is_empty() || self.progressive_schedule[0].0 != 0 {
            return bad("progressive_schedule", "must start at iteration 0".into());
        }
        for w in self.progressive_schedule.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                return bad(
                    "progressive_schedule",
                    "thresholds must increase and N must not decrease".into(),
                );
            }
        }
        let min_n = if self.grid_mode == GridMode::Flexible {
            2
        } else {
            1
        };
        if self.progressive_schedule.iter().any(|p| p.1 < min_n) {
            return bad(
                "progressive_schedule",
                format!("N must be at least {min_n}"),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(
                "ema_decay",
                format!("must lie in [0, 1), got {}", self.ema_decay),
            );
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers", "must be positive".into());
        }
        Ok(())
    }

    /// Number of steps in force at `iteration`.
    pub fn steps_at(&self, iteration: u64) -> usize {
        self.progressive_schedule
            .iter()
            .take_while(|p| p.0 <= iteration)
            .last()
            .map_or(self.progressive_schedule[0].1, |p| p.1)
    }

    pub fn net_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec::new(dim, self.hidden_widths.clone(), self.time_embed_dim)
    }

    /// Grid used at `iteration`; flexible grids are redrawn per batch.
    pub fn grid_at(&self, iteration: u64) -> Result<TimeGrid> {
        let n = self.steps_at(iteration);
        match self.grid_mode {
            GridMode::Flexible => {
                let mut r = rng::stream(self.seed, domain::GRID, iteration, 0);
                TimeGrid::flexible(n, self.horizon, self.beta, &mut r)
            }
            _ => TimeGrid::fixed(n, self.horizon, self.beta),
        }
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            mode: match c.str("mode")? {
                Some(m) => Mode::from_name(&m)?,
                None => d.mode,
            },
            hidden_widths: c.usize_list("hidden_widths")?.unwrap_or(d.hidden_widths),
            time_embed_dim: c
                .u64("time_embed_dim")?
                .map_or(d.time_embed_dim, |v| v as usize),
            g: c.f64("g")?.unwrap_or(d.g),
            horizon: c.f64("horizon")?.unwrap_or(d.horizon),
            beta: c.f64("beta")?.unwrap_or(d.beta),
            grid_mode: match c.str("grid_mode")? {
                Some(m) => GridMode::from_name(&m)?,
                None => d.grid_mode,
            },
            progressive_schedule: match c.pair_list("progressive_schedule")? {
                Some(p) => p.into_iter().map(|(a, b)| (a, b as usize)).collect(),
                None => d.progressive_schedule,
            },
            iterations: c.u64("iterations")?.unwrap_or(d.iterations),
            batch_size: c.u64("batch_size")?.map_or(d.batch_size, |v| v as usize),
            learning_rate: c.f64("learning_rate")?.unwrap_or(d.learning_rate),
            ema_decay: c.f64("ema_decay")?.unwrap_or(d.ema_decay),
            clip_norm: c.f64("clip_norm")?.unwrap_or(d.clip_norm),
            seed: c.u64("seed")?.unwrap_or(d.seed),
            checkpoint_every: c.u64("checkpoint_every")?.unwrap_or(d.checkpoint_every),
            workers: c.u64("workers")?.map_or(d.workers, |v| v as usize),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::new();
        c.insert("mode", self.mode.name());
        c.insert(
            "hidden_widths",
            self.hidden_widths
                .iter()
                .map(|&w| w as i64)
                .collect::<Vec<_>>(),
        );
        c.insert("time_embed_dim", self.time_embed_dim as i64);
        c.insert("g", self.g);
        c.insert("horizon", self.horizon);
        c.insert("beta", self.beta);
        c.insert("grid_mode", self.grid_mode.name());
        c.insert(
            "progressive_schedule",
            self.progressive_schedule
                .iter()
                .map(|&(a, b)| toml::Value::Array(vec![(a as i64).into(), (b as i64).into()]))
                .collect::<Vec<_>>(),
        );
        c.insert("iterations", self.iterations as i64);
        c.insert("batch_size", self.batch_size as i64);
        c.insert("learning_rate", self.learning_rate);
        c.insert("ema_decay", self.ema_decay);
        c.insert("clip_norm", self.clip_norm);
        c.insert("seed", self.seed as i64);
        c.insert("checkpoint_every", self.checkpoint_every as i64);
        c.insert("workers", self.workers as i64);
        c
    }

    pub fn init_model(&self, dim: usize) -> Result<Model> {
        Model::init(
            self.mode,
            &self.net_spec(dim),
            self.g,
            self.horizon,
            self.seed,
        )
    }
}

/// Batch-mean loss and gradient, split into fixed-size chunks evaluated in
/// parallel and summed in chunk order.
pub fn batch_gradient(
    batch: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    model: &Model,
    noise: NoiseSource,
) -> Result<AdjointResult> {
    let rows = batch.nrows();
    if rows == 0 {
        return Err(Error::contract("empty batch"));
    }
    let starts: Vec<usize> = (0..rows).step_by(CHUNK_ROWS).collect();
    let parts: Vec<Result<(usize, AdjointResult)>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_ROWS).min(rows);
            let chunk = batch.slice(s![start..end, ..]);
            let res = if model.schedule.is_zero() {
                nf_loss_gradient(chunk, grid, model)?
            } else {
                let traj = sample_forward_trajectory(chunk, grid, model, noise.offset(start))?;
                adjoint_gradient(&traj, model)?
            };
            Ok((end - start, res))
        })
        .collect();
    let mut total = AdjointResult {
        loss: 0.0,
        prior_term: 0.0,
        noise_term: 0.0,
        grad: vec![0.0; model.num_params()],
    };
    for part in parts {
        let (n, r) = part?;
        let w = n as f64 / rows as f64;
        total.loss += w * r.loss;
        total.prior_term += w * r.prior_term;
        total.noise_term += w * r.noise_term;
        for (a, b) in total.grad.iter_mut().zip(&r.grad) {
            *a += w * b;
        }
    }
    Ok(total)
}

/// Rows drawn uniformly with replacement for `iteration`.
pub fn draw_batch(
    data: ArrayView2<'_, f64>,
    size: usize,
    seed: u64,
    iteration: u64,
) -> Array2<f64> {
    let mut r = rng::stream(seed, domain::BATCH, iteration, 0);
    let n = data.nrows();
    let mut out = Array2::zeros((size, data.ncols()));
    for mut row in out.rows_mut() {
        row.assign(&data.row(r.random_range(0..n)));
    }
    out
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub prior_term: f64,
    pub noise_term: f64,
    pub grad_norm: f64,
    pub steps: usize,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "iteration,loss,prior_term,noise_term,grad_norm,N,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.loss,
            self.prior_term,
            self.noise_term,
            self.grad_norm,
            self.steps,
            self.wall_ms
        )
    }
}

/// Where training writes its side products.
#[derive(Default)]
pub struct TrainSink<'a> {
    /// Receives [`LOG_HEADER`] (unless resuming) and one line per iteration.
    pub log: Option<&'a mut dyn Write>,
    /// Checkpoint path rewritten every `checkpoint_every` iterations and at the end.
    pub checkpoint: Option<&'a Path>,
    /// Called after every iteration.
    pub observer: Option<&'a mut dyn FnMut(&LogRow)>,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, dim: usize) -> Result<Self> {
        let model = config.init_model(dim)?;
        let n = model.num_params();
        Ok(Self {
            config: config.clone(),
            iteration: 0,
            ema: model.params_flat(),
            adam: AdamState::new(n),
            model,
        })
    }
}

/// Runs training from `state` (fresh or resumed) until `config.iterations`.
pub fn train(
    data: ArrayView2<'_, f64>,
    state: TrainState,
    sink: TrainSink<'_>,
) -> Result<TrainState> {
    let workers = state.config.workers;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    train_loop(data, state, sink, &pool)
}

fn train_loop(
    data: ArrayView2<'_, f64>,
    mut state: TrainState,
    mut sink: TrainSink<'_>,
    pool: &rayon::ThreadPool,
) -> Result<TrainState> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if data.nrows() == 0 || data.ncols() != state.model.dim() {
        return Err(Error::contract(format!(
            "training data must be non-empty with {} columns",
            state.model.dim()
        )));
    }
    let hyper = AdamHyper::new(cfg.learning_rate);
    if let Some(log) = sink.log.as_deref_mut() {
        if state.iteration == 0 {
            writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io("training log", e))?;
        }
    }
    let mut failures = 0u32;
    let mut params = state.model.params_flat();
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let started = Instant::now();
        let grid = cfg.grid_at(it)?;
        let batch = draw_batch(data, cfg.batch_size, cfg.seed, it);
        let noise = NoiseSource {
            seed: cfg.seed,
            round: it,
            first_index: 0,
        };
        match pool.install(|| batch_gradient(batch.view(), &grid, &state.model, noise)) {
            Ok(mut res) => {
                failures = 0;
                let grad_norm = clip_global_norm(&mut res.grad, cfg.clip_norm);
                adam_step(&mut params, &res.grad, &mut state.adam, &hyper);
                state.model.set_params_flat(&params)?;
                ema_update(&mut state.ema, &params, cfg.ema_decay);
                let row = LogRow {
                    iteration: it,
                    loss: res.loss,
                    prior_term: res.prior_term,
                    noise_term: res.noise_term,
                    grad_norm,
                    steps: grid.steps(),
                    wall_ms: started.elapsed().as_millis(),
                };
                if let Some(log) = sink.log.as_deref_mut() {
                    writeln!(log, "{}", row.csv()).map_err(|e| Error::io("training log", e))?;
                }
                if let Some(obs) = sink.observer.as_deref_mut() {
                    obs(&row);
                }
                if it % 100 == 0 {
                    log::info!(
                        "iteration {it}: loss {:.5} N {} |g| {:.3e}",
                        row.loss,
                        row.steps,
                        grad_norm
                    );
                }
            }
            Err(
                e @ (Error::Diverged { .. }
                | Error::NonFinite { .. }
                | Error::SingularJacobian { .. }),
            ) => {
                failures += 1;
                log::warn!("iteration {it} skipped: {e}");
                if failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::TrainingAborted {
                        iteration: it,
                        failures,
                    });
                }
            }
            Err(e) => return Err(e),
        }
        state.iteration += 1;
        if let Some(path) = sink.checkpoint {
            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
                write_train_state(path, &state)?;
            }
        }
    }
    if let Some(path) = sink.checkpoint {
        write_train_state(path, &state)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden_widths: vec![16, 16],
            time_embed_dim: 8,
            horizon: 1.0,
            progressive_schedule: vec![(0, 4), (3, 6)],
            iterations: 6,
            batch_size: 70,
            learning_rate: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn toy_data() -> Array2<f64> {
        Array2::from_shape_fn((200, 2), |(r, c)| {
            let sgn = if r % 2 == 0 { 1.0 } else { -1.0 };
            if c == 0 {
                1.5 * sgn + 0.1 * ((r * 7 % 13) as f64 / 13.0 - 0.5)
            } else {
                0.1 * ((r * 5 % 11) as f64 / 11.0 - 0.5)
            }
        })
    }

    #[test]
    fn progressive_schedule_switches_at_threshold() {
        let cfg = TrainConfig {
            progressive_schedule: vec![(0, 10), (1000, 30)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.steps_at(0), 10);
        assert_eq!(cfg.steps_at(999), 10);
        assert_eq!(cfg.steps_at(1000), 30);
        assert_eq!(cfg.grid_at(5000).unwrap().steps(), 30);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = TrainConfig::default();
        cfg.progressive_schedule = vec![(0, 30), (10, 10)];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("progressive_schedule"), "{msg}");
        cfg = TrainConfig {
            ema_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("ema_decay"));
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = small_config();
        let text = cfg.to_config().render();
        let back = TrainConfig::from_config(&Config::parse(&text).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn chunked_gradient_is_independent_of_worker_count() {
        let cfg = small_config();
        let model = TrainState::fresh(&cfg, 2).unwrap().model;
        let mut model = model;
        let p: Vec<f64> = model
            .params_flat()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.01 * ((i % 7) as f64 - 3.0))
            .collect();
        model.set_params_flat(&p).unwrap();
        let data = toy_data();
        let grid = cfg.grid_at(0).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    batch_gradient(data.view(), &grid, &model, NoiseSource::new(4)).unwrap()
                })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn ema_with_zero_decay_tracks_params() {
        let cfg = TrainConfig {
            ema_decay: 0.0,
            ..small_config()
        };
        let data = toy_data();
        let state = train(
            data.view(),
            TrainState::fresh(&cfg, 2).unwrap(),
            TrainSink::default(),
        )
        .unwrap();
        assert_eq!(state.ema, state.model.params_flat());
        assert_eq!(state.iteration, 6);
        assert_eq!(state.adam.t, 6);
    }

    #[test]
    fn identical_seeds_give_identical_states_and_logged_n_follows_schedule() {
        let cfg = small_config();
        let data = toy_data();
        let mut log_a = Vec::new();
        let a = train(
            data.view(),
            TrainState::fresh(&cfg, 2).unwrap(),
            TrainSink {
                log: Some(&mut log_a),
                ..TrainSink::default()
            },
        )
        .unwrap();
        let b = train(
            data.view(),
            TrainState::fresh(&cfg, 2).unwrap(),
            TrainSink::default(),
        )
        .unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(log_a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        let ns: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(5).unwrap())
            .collect();
        assert_eq!(ns, vec!["4", "4", "4", "6", "6", "6"]);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let cfg = small_config();
        let data = toy_data();
        let full = train(
            data.view(),
            TrainState::fresh(&cfg, 2).unwrap(),
            TrainSink::default(),
        )
        .unwrap();
        let half_cfg = TrainConfig {
            iterations: 3,
            ..cfg.clone()
        };
        let mut half = train(
            data.view(),
            TrainState::fresh(&half_cfg, 2).unwrap(),
            TrainSink::default(),
        )
        .unwrap();
        half.config = cfg;
        let resumed = train(data.view(), half, TrainSink::default()).unwrap();
        assert_eq!(full, resumed);
    }

    #[test]
    fn nf_mode_trains_through_the_same_loop() {
        let cfg = TrainConfig {
            mode: Mode::Nf,
            ..small_config()
        };
        let data = toy_data();
        let state = train(
            data.view(),
            TrainState::fresh(&cfg, 2).unwrap(),
            TrainSink::default(),
        )
        .unwrap();
        assert!(state.model.schedule.is_zero());
        assert!(state.model.params_flat().iter().all(|v| v.is_finite()));
    }
}
