//! Ternary quantization-aware training toolkit.
//!
//! The crate is generic over the floating-point [`Scalar`]; training runs in
//! `f32` and the gradient-check suites in `f64`. Concrete aliases for both
//! are exported at the crate root.

pub mod autograd;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod packed;
pub mod param;
pub mod quantizer;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, PackedModel, TransformerModel, WeightMode};
pub use packed::{OpCounts, PackedTernaryMatrix};
pub use param::{ParamId, ParamStore, Parameter};
pub use quantizer::{GroupSpec, QuantMode, SteConfig, TernaryGroupQuant};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = TransformerModel<f32>;
pub type Model64 = TransformerModel<f64>;
