//! Class-agnostic object detection toolkit.
//!
//! The crate has two halves. The model half is a desk-scale detector built
//! from multi-scale deformable attention over a feature pyramid, a query
//! decoder, and a late-fusion stack that concatenates decoded object queries
//! with token embeddings and runs them through shared self-attention blocks,
//! with a detection head after every block. Gradients come from a small
//! reverse-mode tape in [`numerics`].
//!
//! The protocol half evaluates class-agnostic proposals: multi-source pooling
//! with class-agnostic NMS, AP50 / Recall@N, size buckets, per-category
//! recall, tiled inference, open-world pseudo-labels, and mask-to-box
//! conversion.

pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod eval_protocol;
pub mod experiment;
pub mod geometry;
pub mod mask2box;
pub mod matching_losses;
pub mod model;
pub mod msda;
pub mod numerics;
pub mod oracle;
pub mod pseudo_label;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
pub use eval_protocol::{EvalConfig, PrCurve};
pub use geometry::{BoxFormat, Detection, GroundTruthBox, Rect};
pub use model::{DetectionSet, ModelConfig, ModelParams, TokenQuery};
pub use numerics::{Tape, Tensor};

/// Toolkit version embedded in reports and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
