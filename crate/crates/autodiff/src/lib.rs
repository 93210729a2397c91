//! Tape-based reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar (`1×1`) loss walks the list in reverse and
//! accumulates gradients. Everything runs single-threaded on `f64`, so a
//! given forward/backward pass is bit-identical across runs.
//!
//! Freezing is structural: a parameter bound as a constant never enters the
//! differentiated subgraph, so its gradient is exactly zero rather than
//! merely discarded.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{Binding, Bindings, Param, ParamStore};
pub use tape::{Grads, Tape, Tx};
