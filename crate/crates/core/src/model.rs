use crate::dynamics::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::nn::{Mlp, MlpSpec};
use crate::rng::domain;

/// Which degenerate or full variant of the machinery a model represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable drift and score.
    DiffFlow,
    /// Drift frozen to `-x/2`; only the score trains.
    Ddpm,
    /// `g = 0`: a discrete normalizing flow with a trainable drift.
    Nf,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::DiffFlow => "diffflow",
            Mode::Ddpm => "ddpm",
            Mode::Nf => "nf",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "diffflow" => Ok(Mode::DiffFlow),
            "ddpm" => Ok(Mode::Ddpm),
            "nf" => Ok(Mode::Nf),
            other => Err(Error::config(format!(
                "mode must be one of diffflow, ddpm, nf; got `{other}`"
            ))),
        }
    }
}

/// Forward SDE `dx = f dt + g dw` paired with the backward SDE
/// `dx = [f - g^2 s] dt + g dw` on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub drift: Field,
    pub score: Field,
    pub schedule: DiffusionSchedule,
    pub horizon: f64,
}

impl Model {
    pub fn new(
        drift: Field,
        score: Field,
        schedule: DiffusionSchedule,
        horizon: f64,
    ) -> Result<Self> {
        if drift.dim() != score.dim() {
            return Err(Error::config(format!(
                "drift dimension {} differs from score dimension {}",
                drift.dim(),
                score.dim()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            drift,
            score,
            schedule,
            horizon,
        })
    }

    /// Fresh networks for the given mode.
    pub fn init(mode: Mode, spec: &MlpSpec, g: f64, horizon: f64, seed: u64) -> Result<Self> {
        let d = spec.input_dim;
        let net = |dom: u64| -> Result<Field> {
            Ok(Field::Net(Mlp::new(
                spec.clone(),
                crate::rng::key(seed, dom, 0),
            )?))
        };
        match mode {
            Mode::DiffFlow => Model::new(
                net(domain::INIT_DRIFT)?,
                net(domain::INIT_SCORE)?,
                DiffusionSchedule::constant(g)?,
                horizon,
            ),
            Mode::Ddpm => Model::new(
                Field::scaled_identity(d, -0.5),
                net(domain::INIT_SCORE)?,
                DiffusionSchedule::constant(g)?,
                horizon,
            ),
            Mode::Nf => Model::new(
                net(domain::INIT_DRIFT)?,
                Field::zero(d),
                DiffusionSchedule::Constant(0.0),
                horizon,
            ),
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn max_time_frequency(&self) -> f64 {
        self.drift
            .max_time_frequency()
            .max(self.score.max_time_frequency())
    }

    pub fn num_params(&self) -> usize {
        self.drift.num_params() + self.score.num_params()
    }

    /// Drift parameters followed by score parameters.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.drift.params());
        v.extend_from_slice(self.score.params());
        v
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let nd = self.drift.num_params();
        self.drift.params_mut().copy_from_slice(&values[..nd]);
        self.score.params_mut().copy_from_slice(&values[nd..]);
        Ok(())
    }

    /// Splits a flat model-shaped buffer into (drift, score) parts.
    pub fn split_mut<'a>(&self, flat: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        flat.split_at_mut(self.drift.num_params())
    }
}
