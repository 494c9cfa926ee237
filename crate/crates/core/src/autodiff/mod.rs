//! Reverse-mode automatic differentiation over `(batch, channels, time)`
//! sequence tensors.
//!
//! A [`Graph`] records every op as it is evaluated. Sequence values carry a
//! [`Mask`]; every op zeroes padded steps of its output and the backward pass
//! zeroes the incoming gradient at those steps, so padding never leaks into
//! losses or gradients.

mod graph;
mod params;
mod tensor;

pub use graph::{kernels, scalar, Activation, ConvSpec, Graph, OpKind, PoolKind, Var};
pub use params::{AdamW, Param, ParamStore};
pub use tensor::{Mask, SeqTensor, Tensor3};
