//! Dense image tensors and a reverse-mode tape over a fixed operation set.
//!
//! The pipeline differentiated by the lab is static (editor, decoder, losses),
//! so the tape supports a closed vocabulary of primitives rather than general
//! autodiff. All values are `f64`.

mod fd;
mod params;
pub mod resample;
mod tape;
mod tensor;

pub use fd::finite_difference_gradient;
pub use params::{ParamVector, Segment};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::ImageTensor;
