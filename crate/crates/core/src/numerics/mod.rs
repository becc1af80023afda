//! Dense tensors, analytic kernels, a reverse-mode tape, and the
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_gradient_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::{cosine_similarity, euclidean_distance, gelu, layer_norm, linear_forward, softmax_row};
pub use params::{Bound, LayerNormParams, LinearParams, ParamId, ParameterStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

/// H×W×D per-patch feature field.
pub type FeatureGrid<T> = Tensor<T>;
