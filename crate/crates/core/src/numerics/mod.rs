//! Differentiable tensor substrate and finite-difference gradient checking.

mod gradcheck;
mod graph;
mod params;
mod scalar;
pub mod suite;
mod tensor;

pub use gradcheck::{check_param_subset, check_params, finite_difference_gradient, relative_error, GradCheckReport};
pub use graph::{ConvGeom, Gradients, Graph, Tap, Var};
pub use params::{ParamId, Params};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// Epsilon added to denominators (box sides, normalization variance).
pub const DIV_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("unsupported dtype `{0}` (expected float32 or float64)")]
    UnsupportedDtype(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Differentiable operation families the substrate records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    MatMul,
    BatchedMatMul,
    Add,
    Hadamard,
    Relu,
    Softmax,
    LayerNorm,
    Concat,
    Sin,
    Cos,
    GuardedDivision,
    Reshape,
    Permute,
    Sum,
    Mean,
    Sigmoid,
    Log,
}

/// The reverse-mode operations every learnable module is built from.
pub fn required_op_suite() -> &'static [Capability] {
    use Capability::*;
    &[
        MatMul,
        BatchedMatMul,
        Add,
        Hadamard,
        Relu,
        Softmax,
        LayerNorm,
        Concat,
        Sin,
        Cos,
        GuardedDivision,
        Reshape,
        Permute,
        Sum,
        Mean,
        Sigmoid,
        Log,
    ]
}

/// `a / (b + DIV_EPS)`.
pub fn guarded_div<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a / b.offset(DIV_EPS)
}
