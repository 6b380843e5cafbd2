//! Surjective pseudo-invertible networks: coupling blocks, the stacked model,
//! its bijective completion, and the pseudo-inverse modes.

mod block;
mod coordinate;
mod model;
mod oracle;

pub use block::{BlockGrads, BlockShape, SurjectiveBlock, MIXER_INIT_STD};
pub use coordinate::{coordinate_consistency_check, BijectiveCoupling, CoordinateTestCase};
pub use model::{
    CompletionPoint, ModelForwardTrace, ModelGrads, ModelPinvTrace, ParamGroup, PinvMode, SpnnModel, StageSpec,
    Topology,
};
pub use oracle::{preimage_oracle, OracleConfig, ORACLE_MAX_NULL_DIM};

use thiserror::Error;

use crate::linalg::LinalgError;
use crate::nn::NnError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpnnError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("forward parameters are frozen")]
    Frozen,
    #[error("pre-image search restarts disagree by {spread:.3e}")]
    OracleDisagreement { spread: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
