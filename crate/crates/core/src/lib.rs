pub mod agents;
pub mod analysis;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod game;
pub mod gradcheck;
pub mod grounding;
pub mod nn;
pub mod par;
pub mod rng;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};
