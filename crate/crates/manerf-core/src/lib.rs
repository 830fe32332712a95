//! Core algorithms for expression-controllable head synthesis: a reverse-mode
//! autodiff tensor engine, a synthetic blendshape head model, a sparse
//! deformation-feature volume, the deformation/radiance fields, volume
//! rendering, training objectives, an analytic ground-truth scene, and image
//! metrics.
//!
//! The crate is `no_std` (alloc required) and does no IO; file formats, the
//! training loop, and the CLI live in the companion `manerf` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod fd;
pub mod fmath;
pub mod rng;
pub mod fields;
pub mod head;
pub mod tensor;
pub mod volume;
