//! Promptable bone segmentation: a SAM-style 2D branch with bottleneck
//! adapters, a low-resolution 3D branch that distils per-slice depth
//! attention, a learnable fusion gate between them, and the staged training,
//! evaluation and serving machinery around the model.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod depth3d;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod nn;
pub mod prompting;
pub mod sam2d;
pub mod service;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
