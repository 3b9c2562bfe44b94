//! Dense tensors, reverse-mode autodiff, Adam and a seeded PCG32 generator.

mod adam;
mod rng;
mod store;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use rng::Rng;
pub use store::ParamStore;
pub use tape::{backward, Grads, Tape, Var};
pub use tensor::{gelu, layer_norm, matmul, matmul_t, softmax_masked, DType, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
