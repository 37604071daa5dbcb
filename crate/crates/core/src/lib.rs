//! Reverse-mode tensors, reaction-diffusion growth, and a segmentation
//! trainer regularised by a learned tumour density.

pub mod dataset;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod field;
pub mod gradcheck;
pub mod growth;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod segnet;
pub mod suite;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::Field3D;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Boundary, Tensor};
