//! Minimal dense tensor arithmetic with tape-based reverse-mode
//! differentiation, sized for desk-scale sequence models.
//!
//! ```
//! use gnnsl_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = tape.sum(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

mod error;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckEntry, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Param, ParamId, ParamSet};
pub use tape::{softmax, Gradients, Tape, Var};
pub use tensor::Tensor;
