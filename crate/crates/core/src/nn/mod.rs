//! Small feed-forward networks with hand-written reverse passes, Adam, and a
//! seeded RNG. Everything runs in `f64`.

mod adam;
mod gradcheck;
mod mlp;
mod rng;

pub use adam::{clip_global_norm, AdamConfig, AdamState, StepInfo};
pub use gradcheck::{finite_difference, gradient_check, relative_error, GRAD_CHECK_FLOOR};
pub use mlp::{Activation, Head, MlpNet, Tape, SCALE_HEAD_GAIN};
pub use rng::Rng;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape was recorded before the network parameters changed")]
    StaleTape,
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
}
