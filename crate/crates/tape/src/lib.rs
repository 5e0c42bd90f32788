//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op as it is evaluated; [`Graph::backward`]
//! sweeps the tape in reverse. Spatial tensors are channels-last
//! (`[H, W, C]`, `[X, Y, Z, C]`), and row-wise ops treat the last dimension
//! as columns.
//!
//! ```
//! use voxtrack_tape::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, -2.0]));
//! let w = g.leaf(Tensor::new(vec![2, 1], vec![3.0, 0.5]));
//! let y = g.relu(g.matmul(x, w));
//! let grads = g.backward(y);
//! assert_eq!(g.value(y).item(), 2.0);
//! assert_eq!(grads.get(w).unwrap(), &[1.0, -2.0]);
//! ```

mod graph;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{BackFn, Grads, Graph, Var};
pub use ops::{gemm, masked_softmax_rows, Pad2d, Padding};
pub use optim::{clip_grad_norm, cosine_lr, AdamW};
pub use params::{Binder, ParamStore};
pub use tensor::Tensor;
