//! Decoding workbench for the toric code.
//!
//! The crate bundles the code construction itself, a depolarizing-noise
//! sampler with a reproducible dataset format, two classical decoders
//! (minimum-weight perfect matching and belief propagation), a small
//! reverse-mode autodiff engine, a SoftMoE transformer decoder built on it,
//! and Monte Carlo evaluation / training / comparison harnesses.

pub mod autodiff;
pub mod bits;
pub mod compare;
pub mod decoders;
pub mod error;
pub mod eval;
pub mod train;
pub mod gf2;
pub mod model;
pub mod noise;
pub mod lattice;
pub(crate) mod wire;

pub use wire::sha256_hex;

pub use bits::BitVec;
pub use error::{Error, Result};
pub use lattice::{
    build_toric_code, symplectic_product, CheckCoord, CheckKind, EdgeCoord, EdgeKind, Pauli,
    PauliError, Syndrome, ToricCode,
};
