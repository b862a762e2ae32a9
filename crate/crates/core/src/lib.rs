//! Low-light data enhancement for lane detection: unpaired light-condition
//! translation, a lane detector with an existence branch, lane decoding and
//! CULane-style scoring.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod imaging;
pub mod nn;
pub mod postprocess;
pub mod simcyclegan;
pub mod transfer;

pub use error::{Error, Result};
