//! Unpaired cross-modal knowledge distillation for lesion detection.
//!
//! A single-stage anchor detector is trained on a data-rich 2-D modality
//! (the teacher) and its knowledge is transferred to a detector for a
//! data-poor slice-stack modality (the student) through lesion-level
//! prototypes computed at critical feature-map points.

pub mod ablation;
pub mod autodiff;
pub mod codec;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
