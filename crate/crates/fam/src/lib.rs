//! Multi-agent reinforcement learning with fact-based agent modeling.
//!
//! Each agent infers a latent representation of the other agents' policies
//! purely from its own observation-action-reward stream via a recurrent
//! variational encoder-decoder, and conditions a PPO actor-critic on that
//! belief. The crate ships the two particle-world tasks (cooperative
//! navigation and predator-prey), the belief-inference module, PPO/A2C
//! losses, a training harness with ablations and baselines, and the
//! evaluation/export tooling.

pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod fbi;
pub mod plot;
pub mod rl;
pub mod trainer;
pub mod nn;

pub use error::{FamError, Result};
