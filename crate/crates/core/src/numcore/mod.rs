//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]s; differentiable computation is recorded on a
//! [`Tape`] as [`Var`] handles, and [`Tape::backward`] replays the adjoints in
//! reverse recording order. Learnable weights live in a [`ParamStore`] and are
//! updated by [`Adam`].

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use nn::{Conv2d, Linear};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
