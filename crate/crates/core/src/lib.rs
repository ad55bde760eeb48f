//! Diffusion normalizing flows.
//!
//! A trainable forward SDE `dx = f(x, t) dt + g(t) dw` carries data to a
//! Gaussian; a backward SDE `dx = [f - g^2 s] dt + g dw` carries it back. Both
//! networks are fitted jointly by minimizing the KL divergence between the
//! two path measures, with gradients from a stochastic adjoint recursion over
//! cached trajectory states.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use field::Field;
pub use model::{Mode, Model};
