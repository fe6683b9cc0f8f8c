//! Invariant watermarking for 3D molecular structures.
//!
//! An encoder hides a short bit string in atom positions; a decoder reads
//! it back from the distance matrix alone, so the mark survives rotation,
//! translation and reflection.

pub mod codec;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod molecule;
pub mod runtime;
pub mod stats;
pub mod synth;
pub mod training;
pub mod transform;

pub use error::{Error, Result};
