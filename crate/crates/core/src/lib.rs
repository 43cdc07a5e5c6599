//! Recurrent sequence models with learnable per-unit Gaussian noise on layer
//! outputs and learnable per-unit Bernoulli dropout on the recurrent state.

pub mod compute;
pub mod data;
pub mod error;
pub mod head;
pub mod optim;
pub mod rnn;
pub mod tasks;
pub mod trainer;
pub mod vand;

pub use error::{Error, Result};
