//! Gated Delta Rule-2 and its tied-gate family.
//!
//! The crate is layered bottom-up:
//!
//! - [`math`]: dense row-major matrices, the unit-lower-triangular solve and the
//!   pointwise activations everything else is built from.
//! - [`rules`]: tokenwise recurrences (linear attention, Mamba-2, DeltaNet,
//!   Gated DeltaNet, KDA, Gated Delta Rule-2). These are the ground truth.
//! - [`chunk`]: the chunkwise WY-form forward, its analytic backward and
//!   variable-length packing.
//! - [`layer`]: the token-mixer layer built around the chunkwise engine, with a
//!   recurrent decoding path.
//! - [`gradcheck`] and [`synth`]: central finite differences and seeded random
//!   instances used by the verification suites.

pub mod chunk;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod math;
pub mod real;
pub mod rules;
pub mod synth;

pub use error::{Error, Result};
pub use math::{Matrix, Rng, Vector};
pub use real::{Precision, Real};
