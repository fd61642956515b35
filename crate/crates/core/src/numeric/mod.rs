//! Dense linear algebra, reverse-mode differentiation and Adam.
//!
//! Everything trains in `f64`. Serialised serving embeddings are narrowed
//! to `f32` by the store module.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use matrix::{activation, cosine_similarity, dot, norm, sigmoid, softmax, Activation, DenseMatrix};
pub use optim::{AdamConfig, ParamId, Parameter, ParameterSet};
pub use tape::{Gradients, Tape, Var};
