//! Deterministic numeric kernel: arrays, the time-conditioned MLP with its
//! reverse- and forward-mode derivatives, the optimizer and the RNG.

mod array;
mod mlp;
mod optim;
mod rng;

pub use array::Array;
pub(crate) use array::{dot, norm_sq, sq_dist};
pub use mlp::{grad_reverse, Activation, InputGrad, MlpArch, MlpCache, NetParams, TIME_EMBED_WIDTH};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use rng::{gaussian, RngState};
