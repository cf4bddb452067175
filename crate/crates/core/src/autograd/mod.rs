//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! The primitive set is exactly what the recommender needs: linear maps,
//! elementwise nonlinearities, row gathers, (segmented) softmax and
//! reductions. Gradients are verified against central differences in
//! [`finite_difference_check`].

mod check;
mod tape;
mod tensor;

pub use check::{finite_difference_check, relative_error, GradCheck};
pub use tape::{Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
