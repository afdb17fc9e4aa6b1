//! Feature direction alignment for weakly supervised object localization.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference
//!   gradient checker.
//! * [`model`]: the convolutional classifier, SGD and checkpoints.
//! * [`cam`]: CAM decomposition into norm and similarity maps.
//! * [`dropout`]: attentive dropout masks.
//! * [`losses`]: region partitions and the alignment/consistency losses.

pub mod cam;
pub mod config;
pub mod data;
pub mod dropout;
pub mod error;
pub mod eval;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod objective;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
