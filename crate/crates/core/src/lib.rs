//! Bi-branch text-video retrieval.
//!
//! A video is embedded twice: a relation branch runs a spatial transformer
//! over each frame's region proposals and a temporal transformer over the
//! pooled frames, while a global branch encodes fused appearance/motion
//! frame features. Captions are projected and pooled from precomputed
//! token features. Retrieval scores mix the two cosine similarities, and
//! training uses a hinge triplet loss over in-batch negatives.

pub mod error;
pub mod global;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod relation;
pub mod retrieval;
pub mod text;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{BiCNet, Dims, ModelSpec};
pub use par::Parallelism;
pub use relation::SrtVariant;
