//! Dense `f32` tensors, a define-by-run tape for reverse-mode gradients, the
//! convolution and dense layers used by the models, and Adam.

mod adam;
mod error;
mod fpenv;
mod gradcheck;
mod io;
mod kernels;
mod resample;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use fpenv::flush_subnormals;
pub use gradcheck::{grad_check, GradCheckReport};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, PTSR_MAGIC, PTSR_VERSION};
pub use resample::upsample_bilinear;
pub use tape::{Activation, Axes, LossKind, ReduceKind, Tape, Var, PROB_EPS};
pub use tensor::Tensor;
