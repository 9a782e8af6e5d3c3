//! Tensors, kernels, reverse-mode differentiation and optimization.

pub mod adam;
pub mod init;
pub mod kernels;
pub mod params;
pub mod scalar;
pub mod session;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use kernels::{cosine, cosine_matrix, gelu, layer_norm, matmul, softmax};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::{Scalar, ScalarKind};
pub use session::{AttentionRecord, Session};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
