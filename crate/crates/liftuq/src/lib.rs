//! Desk-scale workbench for operator learning on 2D Darcy flow with
//! lifting-restricted Monte Carlo uncertainty quantification.

pub mod calibmetrics;
pub mod cli;
pub mod darcy;
pub mod error;
pub mod operator_net;
pub mod tensor_field;
pub mod render;
pub mod train;
pub mod uq;

pub use cli::cli_main;
pub use error::{Error, Result};
