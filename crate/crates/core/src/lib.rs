//! Recursive region-based detection decoder.
//!
//! Parameter-shared decoding stages built around dynamic convolution, with
//! box and centerness positional encodings, bipartite set losses, a tiny
//! training pipeline and an exact parameter/FLOP auditor.

pub mod audit;
pub mod decoder;
pub mod geometry;
pub mod matching_loss;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod posenc;

/// Single-precision tensor; the default training precision.
pub type Tensor32 = numerics::Tensor<f32>;
/// Double-precision tensor, used by gradient checks and reference tests.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Params32 = numerics::Params<f32>;
pub type Params64 = numerics::Params<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Trainer32 = pipeline::Trainer<f32>;
pub type Trainer64 = pipeline::Trainer<f64>;
