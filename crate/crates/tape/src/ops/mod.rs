mod basic;
mod conv;
pub(crate) mod linalg;
mod norm;
mod sample;
mod softmax;

pub use conv::{Pad2d, Padding};
pub use linalg::gemm;
pub use softmax::masked_softmax_rows;
