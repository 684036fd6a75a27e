//! Dense matrices, seeded sampling and the special functions behind t-test p-values.

mod matrix;
mod rng;
mod special;

pub use matrix::{elementwise, matmul, ElementwiseOp, Matrix};
pub use rng::{gaussian_sample, streams, Rng};
pub use special::{ln_gamma, reg_inc_beta, t_two_sided_p};
