//! Reverse-mode differentiation over dense tensors, plus Adam.
//!
//! Models register their tensors in a [`ParamStore`], bind them onto a fresh
//! [`Tape`] for every forward pass, and call [`Tape::backward`] to sum
//! gradients back into the store. Element type is a type parameter
//! (`f32` for training, `f64` for gradient verification).

mod adam;
mod backward;
mod conv;
mod norm;
mod ops;
mod params;
mod real;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::conv_out_size;
pub use norm::{BnStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use real::{matmul_into, DType, Real};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use ops::sigmoid;
