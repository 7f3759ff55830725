//! Dense f64 tensors, reverse-mode autodiff, layers and optimizers.

pub mod adam;
pub mod checkpoint;
pub(crate) mod conv;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use checkpoint::TensorArchive;
pub use gradcheck::{finite_difference_check, gradient_check, GradCheckReport};
pub use nn::Phase;
pub use params::{ParamId, ParamKind, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
