//! Dense tensors, reverse-mode autodiff, and seeded randomness.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, cosine, dot, mean, norm, softmax_rows, std_dev, Tensor, DEGENERATE_NORM};
