//! Generic event boundary detection over precomputed frame features.
//!
//! The pipeline: load per-frame features, split them into overlapping
//! context windows ([`spos`]), run the boundary network ([`network`]),
//! train it against softened boundary labels ([`supervision`],
//! [`training`]), turn per-frame scores into boundary timestamps
//! ([`inference`]) and score those against annotations ([`evaluation`]).
//!
//! All arithmetic is `f64`. Gradients come from a small tape-based
//! reverse-mode engine in [`autograd`].

// `!(x > y)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
mod io_util;
pub mod network;
pub mod param;
pub mod spos;
pub mod supervision;
pub mod tensor;
pub mod training;

pub use io_util::write_atomic;
pub use data::{BoundaryAnnotation, FrameFeatureSequence, LabeledVideo, SyntheticSpec};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, Matching};
pub use inference::{BoundaryScores, DetectionResult};
pub use network::{ScTransformer, TrunkConfig};
pub use spos::{ContextGroup, ContextPlan};
pub use supervision::{SoftLabels, SupervisionConfig};
pub use tensor::Tensor;
pub use training::{EpochReport, Schedule, TrainConfig};
