//! Tape-based reverse-mode automatic differentiation.
//!
//! The engine records a forward computation as a flat list of nodes on a
//! [`Tape`], then walks the list backwards to produce gradients for every
//! parameter and leaf that contributed to a scalar loss. Operations are
//! coarse-grained (whole layers, not scalars) and carry a leading batch
//! dimension, so the heavy lifting ends up in a handful of matrix products.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training) and
//! `f64` (finite-difference verification).
//!
//! ```
//! use contourlab_autodiff::{ParamSet, Tape, Tensor};
//!
//! let mut params = ParamSet::<f64>::new();
//! let x = params.insert("x", Tensor::from_vec(vec![1], vec![3.0])).unwrap();
//! let mut tape = Tape::new(&params);
//! let xv = tape.param(x);
//! let y = tape.mul(xv, xv).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y), &[9.0]);
//! assert_eq!(grads.param(x).unwrap(), &[6.0]);
//! ```

mod error;
mod gemm;
pub mod gradcheck;
pub mod init;
pub mod optim;
mod real;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{grad_check, primitive_checks, relative_error, GradCheckReport, Selection};
pub use optim::{adam_step, AdamState, PlateauSchedule};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

pub type Result<T> = std::result::Result<T, AutodiffError>;
