use std::process::ExitCode;

use spnn::checkpoint::CheckpointError;
use spnn::config::ConfigError;
use spnn::data::DataError;
use spnn::diffusion::DiffusionError;
use spnn::linalg::LinalgError;
use spnn::losses::LossError;
use spnn::nlbp::NlbpError;
use spnn::nn::NnError;
use spnn::spnn::SpnnError;
use spnn::verify::VerifyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Verification(_) | CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }
}

fn nn(e: &NnError) -> bool {
    matches!(e, NnError::NonFiniteGradient { .. })
}

fn spnn(e: &SpnnError) -> bool {
    match e {
        SpnnError::Nn(e) => nn(e),
        SpnnError::Linalg(LinalgError::NonFinite | LinalgError::Singular) => true,
        _ => false,
    }
}

fn loss(e: &LossError) -> bool {
    match e {
        LossError::Diverged { .. } => true,
        LossError::Spnn(e) => spnn(e),
        LossError::Nn(e) => nn(e),
        _ => false,
    }
}

fn diffusion(e: &DiffusionError) -> bool {
    match e {
        DiffusionError::NonFinite { .. } | DiffusionError::Diverged { .. } => true,
        DiffusionError::Spnn(e) | DiffusionError::Nlbp(NlbpError::Spnn(e)) => spnn(e),
        DiffusionError::Nn(e) => nn(e),
        _ => false,
    }
}

fn classify(numerical: bool, msg: String) -> CliError {
    if numerical {
        CliError::Numerical(msg)
    } else {
        CliError::Failed(msg)
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        classify(loss(&e), e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        classify(diffusion(&e), e.to_string())
    }
}

impl From<SpnnError> for CliError {
    fn from(e: SpnnError) -> Self {
        classify(spnn(&e), e.to_string())
    }
}

impl From<NlbpError> for CliError {
    fn from(e: NlbpError) -> Self {
        match e {
            NlbpError::Spnn(e) => e.into(),
            NlbpError::InvalidLambda(_) | NlbpError::IndexOutOfRange { .. } => CliError::Usage(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Loss(e) => e.into(),
            VerifyError::Diffusion(e) => e.into(),
            VerifyError::Spnn(e) => e.into(),
            VerifyError::Nlbp(e) => e.into(),
            VerifyError::Config(m) => CliError::Usage(m),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        classify(matches!(e, LinalgError::NonFinite | LinalgError::NoConvergence { .. }), e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Failed(format!("config: {e}")),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Failed(format!("checkpoint: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Empty | DataError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            e => CliError::Failed(format!("dataset: {e}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(format!("io: {e}"))
    }
}
