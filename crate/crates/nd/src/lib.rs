//! Minimal dense tensor arithmetic with tape-based reverse-mode automatic
//! differentiation.
//!
//! Values are immutable [`Tensor`]s. A [`Tape`] records every differentiable
//! operation executed through it; [`Tape::backward`] replays the record in
//! reverse to produce [`Gradients`] for parameters and gradient-tracking
//! leaves. Parameters live in a [`ParamStore`] and are bound to a tape per
//! forward pass, so a frozen store can be shared across threads while each
//! thread owns its own tape.

mod error;
pub mod gradcheck;
pub mod kernels;
mod mask;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use mask::Mask;
pub use optim::{Adam, AdamConfig, GradBuffer};
pub use params::{CheckpointEntry, CheckpointManifest, ParamId, ParamStore, BLOB_FILE, MANIFEST_FILE};
pub use real::Real;
pub use tape::{CustomBackward, Gradients, Padding, Tape, Var};
pub use tensor::Tensor;
