//! Degenerate modes of the same machinery: a DDPM-style frozen drift and the
//! deterministic normalizing-flow limit.

pub mod nf;

pub use nf::{
    nf_invert, nf_loss_gradient, nf_mode_nll, nf_sample, posterior_matched_objective,
    step_jacobians,
};

use ndarray::Array2;

use crate::dynamics::TimeGrid;
use crate::error::Result;
use crate::evaluation::{sample, SamplerConfig};
use crate::model::{Mode, Model};
use crate::nn::MlpSpec;

/// Model with drift frozen to `-x/2` and a trainable score; trained by the
/// same loss and adjoint as the full model.
pub fn ddpm_mode(spec: &MlpSpec, g: f64, horizon: f64, seed: u64) -> Result<Model> {
    Model::init(Mode::Ddpm, spec, g, horizon, seed)
}

/// Samples from a model trained in `mode`. NF-mode models are discrete flows,
/// so their layers are inverted on the fixed grid with exponent `train_beta`;
/// `cfg.lambda` and `cfg.final_denoise` do not apply to them.
pub fn sample_trained(
    n: usize,
    cfg: &SamplerConfig,
    mode: Mode,
    train_beta: f64,
    model: &Model,
) -> Result<Array2<f64>> {
    match mode {
        Mode::Nf => nf_sample(
            n,
            &TimeGrid::fixed(cfg.steps, model.horizon, train_beta)?,
            model,
            cfg.seed,
        ),
        _ => sample(n, cfg, model),
    }
}

/// Grid with `dt_i = beta_i`.
pub fn grid_from_betas(betas: &[f64]) -> Result<TimeGrid> {
    TimeGrid::from_deltas(betas)
}
