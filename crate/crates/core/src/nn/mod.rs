//! Function approximators for the drift and score fields.

pub mod checkpoint;
pub mod mlp;
pub mod params;

pub use mlp::{init_params, Activation, Activations, Mlp, MlpSpec, Tangents};
pub use params::{ParamVector, Segment};
