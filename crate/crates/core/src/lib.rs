//! Spatial-temporal transformer networks for multi-step traffic-speed
//! forecasting on sensor graphs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synth;
pub mod train;

pub use autodiff::{Graph, Mask, Tensor, Var};
pub use error::{Error, Result};
