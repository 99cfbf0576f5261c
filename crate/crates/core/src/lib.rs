//! Hybrid state-space / attention network for joint optical flow and stereo
//! disparity estimation, with synthetic data, metrics, file formats,
//! checkpointing and a toy training loop.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod denviscom;
pub mod error;
pub mod formats;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod ssm;
pub mod synth;
pub mod train;
pub mod trunk;

pub use error::{Error, Result};
