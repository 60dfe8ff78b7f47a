//! Agent modelling from the controlled agent's local information.
//!
//! The crate bundles three partially observable multi-agent environments,
//! pools of fixed modelled-agent policies, recurrent encoder-decoder agent
//! models (plus contrastive, classification and variational baselines), an
//! A2C learner conditioned on the learned embeddings, and the evaluation
//! probes used to inspect those embeddings.

pub mod envs;
pub mod error;
pub mod io;
pub mod models;
pub mod nn;
pub mod pool;
pub mod probe;
pub mod rl;

pub use error::{Error, Result};
