//! Core algorithms for federated aggregation with selective parameter
//! encryption.
//!
//! Everything here is pure computation over in-memory values and builds
//! without `std` (only `alloc` is required). File formats, the protocol
//! driver and the command line live in the `selenc` crate.
//!
//! Module map:
//!
//! - [`model`]: tiny dense models, losses, analytic gradients, flatten/reshape.
//! - [`he`]: packed fixed-point additive HE (Paillier and a byte-accounting mock).
//! - [`shamir`]: k-of-n secret sharing of HE secret keys.
//! - [`sensitivity`] and [`mask`]: per-parameter sensitivity maps and top-p
//!   encryption masks.
//! - [`dp`]: Laplace mechanism and privacy budgets of masking policies.
//! - [`attack`]: gradient-matching inversion attack and defense curves.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attack;
pub mod dp;
pub mod he;
pub mod mask;
pub mod model;
pub mod rng;
pub mod sensitivity;
pub mod shamir;

pub use model::{Activation, Dataset, Layer, LossKind, ModelShape, ParamVector};
