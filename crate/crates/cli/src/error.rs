use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const ARGUMENT: i32 = 2;
    pub const IO: i32 = 3;
    pub const SCHEMA: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ncmfair::Error),

    #[error("could not parse config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("{0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use ncmfair::Error as E;
        match self {
            CliError::Usage(_) | CliError::Toml(_) => exit::ARGUMENT,
            CliError::Verify(_) => exit::SCHEMA,
            CliError::Core(e) => match e {
                E::Argument(_) | E::Config(_) => exit::ARGUMENT,
                E::Io { .. } => exit::IO,
                E::Schema(_) | E::Json(_) | E::Csv(_) => exit::SCHEMA,
                E::Training { .. } | E::Numerical { .. } => exit::DIVERGENCE,
                E::Model(_) | E::DegenerateFit(_) | E::Comparison(_) => exit::OTHER,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
