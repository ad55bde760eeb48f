//! Trajectory-KL loss, stochastic adjoint gradients, Adam with EMA and the
//! training loop with progressive step counts.

pub mod adjoint;
pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod train;

pub use adjoint::{adjoint_gradient, AdjointResult};
pub use checkpoint::{read_train_state, write_train_state, TrainState};
pub use loss::{loss, trajectory_loss, LossBreakdown, LossConstants};
pub use optim::{adam_step, AdamHyper, AdamState};
pub use train::{batch_gradient, train, LogRow, TrainConfig, TrainSink, LOG_HEADER};
