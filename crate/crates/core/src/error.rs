use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temporal alignment needs {expected} channel frames for {scenes} scenes, got {got}")]
    Alignment { scenes: usize, expected: usize, got: usize },
    #[error("scene produces no propagation paths (LOS disabled and no scatterers)")]
    NoPaths,
    #[error("pilot symbol at subcarrier {0} has zero magnitude")]
    ZeroPilot(usize),
    #[error("transmit antenna {0} has no pilot subcarrier")]
    AntennaWithoutPilot(usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("innovation matrix is singular even after regularization")]
    Singular,
    #[error("zero-norm input: {0}")]
    ZeroNorm(String),
    #[error("non-finite training loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("file format: {0}")]
    Format(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] autodiff::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
