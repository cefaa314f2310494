//! Hybrid physics-neural simulation and the training procedures.

pub mod adjoint;
pub mod data;
pub mod dnn;
pub mod hybrid;
pub mod loss;
pub mod pg;
pub mod train;

pub use adjoint::{open_loop_gradient, pi_gradient, simulate_open_loop, GradientResult};
pub use data::{ScenarioData, TrainingSet};
pub use dnn::{dnn_baseline, simulate_dnn_closed_loop, DiscreteSurrogate, DnnOptions, DnnOutcome};
pub use hybrid::{simulate_closed_loop, HybridState, HybridTrajectory, PhysicsJacobian, DIVERGENCE_BOUND};
pub use loss::{loss, LossScales, LossValue};
pub use pg::{connectivity_mask, full_mask, pg_estimate_jacobian, JacobianEstimate};
pub use train::{
    fit_normalization, train_open_loop, train_pg, train_pi, Adam, AdamOptions, CurriculumStage, EpochRecord,
    Episode, TrainOptions, TrainOutcome,
};
