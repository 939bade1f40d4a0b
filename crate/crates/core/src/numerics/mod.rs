//! Dense arithmetic, special functions and reverse-mode differentiation.

mod gradcheck;
pub mod linalg;
mod matrix;
pub mod special;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use linalg::{cholesky_factor, cholesky_with_jitter, solve_spd};
pub use matrix::Matrix;
pub use special::{erf, gaussian_cdf};
pub use tape::{Gradients, Tape, Var};
