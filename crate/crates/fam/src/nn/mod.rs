//! Differentiable function-approximator substrate: autodiff tape, parameter
//! containers, layers, optimizer, and target-network updates.

pub mod layers;
pub mod params;
pub mod tape;

pub use layers::{compute_gradients, Gru, Mlp, RecurrentState};
pub use params::{orthogonal, soft_update, Adam, GradSet, ParamSet, ParamVars};
pub use tape::{Gradients, Tape, VarId};
