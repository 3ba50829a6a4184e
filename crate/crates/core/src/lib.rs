//! Desk-scale lab for watermark-preserving image editing.
//!
//! The crate bundles a small reverse-mode differentiation tape over a closed
//! set of image operations ([`grad`]), a keyed spread-spectrum watermark codec
//! ([`codec`]), a parametric differentiable editor with a frozen reference
//! copy ([`editor`]), the hinge-penalised fine-tuning loop ([`trainer`]),
//! closed-form information bounds ([`bounds`]) with a brute-force certifier
//! over small discrete channels ([`oracle`]), a post-edit distortion suite
//! ([`distort`]), an executable finite-step convergence instance
//! ([`converge`]) and procedural datasets with PPM/PGM I/O ([`synth`],
//! [`ppm`]).

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod codec;
pub mod converge;
pub mod distort;
pub mod editor;
mod error;
pub mod grad;
pub mod oracle;
pub mod ppm;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grad::{ImageTensor, ParamVector, Tape};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
