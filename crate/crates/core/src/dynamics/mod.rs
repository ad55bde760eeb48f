//! Time grids, Euler-Maruyama steps, trajectory simulation and backward-noise
//! reconstruction.

pub mod grid;
pub mod schedule;
pub mod step;
pub mod trajectory;

pub use grid::{GridMode, TimeGrid};
pub use schedule::DiffusionSchedule;
pub use step::{backward_noise, backward_step, forward_step};
pub use trajectory::{
    reconstruct_backward_noise, replay_backward, sample_forward_trajectory, BackwardNoise,
    NoiseSource, Trajectory,
};
