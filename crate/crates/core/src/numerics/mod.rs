//! Dense tensors, the differentiable primitives the pipeline is built from, and gradient
//! verification.

pub mod diff;
pub mod ops;
mod tensor;

pub use diff::{finite_diff_check, numeric_vs_analytic, DiffRecord};
pub use ops::{avg_pool, conv1x1, elementwise_max, global_softmax, relu, ConvGeometry};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TENSOR_MAGIC, TENSOR_VERSION};
