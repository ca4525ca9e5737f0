//! Pose-driven human image animation with a temporal diffusion UNet.

pub mod appearance;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod params;
pub mod pose_control;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
