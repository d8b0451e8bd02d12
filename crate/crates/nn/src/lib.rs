//! Minimal tensor library with tape-based reverse-mode differentiation.
//!
//! Everything the question-answering transformer and the recurrent
//! actor-critic need is here: dense matrices backed by a tuned GEMM, a
//! handful of fused layers (convolution, segmented multi-head attention,
//! layer normalisation, feature-wise modulation), Adam, and a checkpoint
//! container. Models are generic over [`Real`] so the same code trains in
//! `f32` and is gradient-checked in `f64`.

pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use optim::{Adam, StepDecay};
pub use params::{Grads, ParamId, ParamStore};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tape::{softmax_in_place, ConvGeom, Tape, Var, NO_INDEX};
pub use tensor::Tensor;
