//! Minimal reverse-mode differentiation for constraint-network training.
//!
//! The op set is fixed to what the network needs: matrix products,
//! elementwise arithmetic, a handful of activations, masked softmax, layer
//! normalization, depthwise causal convolution, a linear decay scan, and
//! per-sequence reductions. All shapes are explicit; nothing broadcasts.
//!
//! ```
//! use ebcn_diff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use tape::{Gradients, Segments, Tape, UnaryFn, UnaryGradFn, Var, LAYER_NORM_EPS, MASK_NEG};
pub use tensor::Tensor;
