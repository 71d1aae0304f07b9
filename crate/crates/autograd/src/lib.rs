//! Minimal dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! The operation set is what a small transformer encoder needs: matrix
//! products, elementwise arithmetic, softmax, layer normalization, GELU,
//! reductions, a fused multi-head self-attention and a fused binary
//! cross-entropy. [`grad_check`] verifies any tape-built scalar function
//! against central finite differences.
//!
//! ```
//! use autograd::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.constant(Tensor::full(&[2, 2], 1.0));
//! let x = tape.leaf(&Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap().trainable());
//! let y = tape.matmul(w, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x), vec![2.0, 2.0]);
//! ```

mod error;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use tape::{AttentionLayout, Tape, Var};
pub use tensor::Tensor;
