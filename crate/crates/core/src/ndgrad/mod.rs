//! Dense n-dimensional arrays with reverse-mode differentiation.
//!
//! Values are [`DiffArray`]s. A [`Tape`] records operations on them and
//! [`Tape::backward`] produces gradients of a scalar root for every leaf.
//! Parameters of a model live in a [`ParamStore`] and are bound to a fresh
//! tape for each forward pass.

mod array;
pub mod gradcheck;
pub mod kernels;
mod params;
mod rng;
mod tape;

pub use array::DiffArray;
pub use kernels::{Conv2dParams, PadMode, ResizeMode};
pub use params::{init, Bound, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};
