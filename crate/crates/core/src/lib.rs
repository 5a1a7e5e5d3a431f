pub mod action;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod nn;
pub mod policy;
pub mod repair;
pub mod rng;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
