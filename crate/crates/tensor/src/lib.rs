//! Minimal dense tensors with tape-based reverse-mode automatic
//! differentiation, covering the primitives of a small convolutional /
//! graph network pipeline: same-padded dilated and grouped 2D convolution,
//! pooling, bilinear upsampling, softmax, batch normalization, row gathers
//! and segment maxima.
//!
//! ```
//! use sgseg_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward_scalar(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod norm;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats, RunningStats};
pub use tensor::Tensor;
