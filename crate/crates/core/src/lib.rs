//! Photometric stereo primitives.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! geometry and angular metrics ([`math`]), synthetic rendering of
//! multi-illumination image stacks ([`render`]), a small reverse-mode
//! differentiable operator set ([`nn`]), the two-stage inter/intra-frame
//! convolutional model built from it ([`model`]), and the classical
//! Lambertian least-squares solver ([`baseline`]).
//!
//! The crate is `no_std` + `alloc`; file formats, datasets and the CLI live
//! in the companion `photostereo` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod error;
pub mod math;
pub mod model;
pub mod nn;
pub mod render;

pub use error::CoreError;
