//! In-context point-prompt prediction on top of a promptable segmenter,
//! with the annotation service that collects its training data.
//!
//! The numerical core lives in `samic-core`; this crate adds files, the
//! segmenter gateway, training and evaluation drivers, the HTTP service and
//! the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod io;
pub mod prompts;
pub mod report;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use samic_core as core;
pub mod annotation;
pub mod server;
