//! Dense arrays, reverse-mode differentiation, Adam and seeded random streams.

mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use conv::{conv_out_extent, conv_transpose_out_extent};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, AdamState, ParamId, ParamStore, Parameter};
pub use rng::{Rng, RngState, Stream};
pub use tensor::{gemm, DType, Scalar, Tensor};
