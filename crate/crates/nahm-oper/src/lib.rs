pub mod error;
pub mod lie_core;
pub mod geometry_fields;
pub mod hitchin_flat;
pub mod nahm_model_approx;
pub mod tbe_solver;
pub mod cli_reporting;
