//! Normalizing-flow particle filtering toolkit: a conditional flow
//! observation model over images, learned linear latent dynamics, Kalman and
//! bootstrap particle filters, maximum-likelihood training, and synthetic
//! benchmark environments.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod filters;
pub mod flow;
pub mod nn;
pub mod par;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
