use crate::nn::NnError;
use crate::plant::PlantError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact `{artifact}`; run `{command}` first")]
    Prerequisite { artifact: String, command: &'static str },
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Prerequisite { .. } => 3,
            Error::Divergence(_) | Error::Plant(PlantError::Diverged { .. }) | Error::Plant(PlantError::NanState) => 4,
            Error::Nn(NnError::NonFiniteGradient { .. }) | Error::Nn(NnError::NonFiniteEvaluation { .. }) => 4,
            Error::Plant(PlantError::InvalidParams(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
