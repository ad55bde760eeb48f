use std::path::PathBuf;

/// Errors raised across the library. Each variant maps onto one CLI exit code
/// (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("trajectory diverged for sample {sample} at step {step}")]
    Diverged { sample: usize, step: usize },

    #[error("zero diffusion coefficient at grid node {node}; use the deterministic (nf) likelihood instead")]
    ZeroDiffusion { node: usize },

    #[error("singular step Jacobian at step {step}")]
    SingularJacobian { step: usize },

    #[error("ODE integrator failed: {reason} (best-effort value {best_effort})")]
    Integrator { reason: String, best_effort: f64 },

    #[error("training aborted after {failures} consecutive non-finite gradients at iteration {iteration}")]
    TrainingAborted { iteration: u64, failures: u32 },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code: 2 usage, 3 numeric divergence, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Parse { .. } => 2,
            Error::NonFinite { .. }
            | Error::Diverged { .. }
            | Error::ZeroDiffusion { .. }
            | Error::SingularJacobian { .. }
            | Error::Integrator { .. }
            | Error::TrainingAborted { .. } => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], context: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context: context() })
    }
}
