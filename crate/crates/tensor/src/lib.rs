//! A small CPU tensor library with reverse-mode automatic differentiation.
//!
//! Tensors are immutable `f32` buffers. Operations on tensors that require
//! grad record themselves, and [`backward`] / [`grad`] walk the recorded
//! graph. Backward rules are built from the same recorded operations, so
//! gradients can be differentiated again:
//!
//! ```
//! use tips_tensor::{grad, Tensor};
//!
//! let x = Tensor::param(vec![3.0], &[1]);
//! let y = x.square().mul(&x); // x^3
//! let dy = grad(&y, &[&x], true).remove(0).unwrap(); // 3x^2
//! let d2y = grad(&dy, &[&x], false).remove(0).unwrap(); // 6x
//! assert_eq!(dy.item(), 27.0);
//! assert_eq!(d2y.item(), 18.0);
//! ```

mod autograd;
mod kernels;
pub mod nn;
pub mod optim;
mod tensor;

pub use autograd::{backward, grad, Gradients};
pub use tensor::{is_grad_enabled, no_grad, Tensor, BELOW_ONE};
