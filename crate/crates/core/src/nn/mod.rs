//! Minimal differentiable numerics for the DRAW model.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod params;
mod real;
mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use conv::{conv2d, conv_transpose2d, ConvGeom, ConvKernel, Padding};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{normal_cdf, Gradients, Graph, Var};
pub use lstm::{conv_lstm_step, lstm_cell, ConvLstmGates, ConvLstmState};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::{Shape4, Tensor4};
