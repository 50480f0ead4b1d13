#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod campaign;
pub mod config;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
