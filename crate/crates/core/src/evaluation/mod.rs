//! Sampling from the family of marginal-equivalent reverse SDEs, exact ODE
//! likelihood, the trajectory bound and export helpers.

pub mod elbo;
pub mod export;
pub mod ode;
pub mod sampler;

pub use elbo::{bits_per_dim, elbo_nll_bound, BoundEstimate};
pub use export::{density_grid, heatmap_svg, write_density_csv, Lattice};
pub use ode::{ode_nll, IntegratorStats, NllReport, OdeOptions, TraceMethod};
pub use sampler::{prior_draws, sample, sample_from, tweedie_denoise, SamplerConfig};
