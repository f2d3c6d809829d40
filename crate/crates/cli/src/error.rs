use fallball::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Run(#[from] Error),

    #[error("inconclusive: {0}")]
    Inconclusive(String),

    #[error("refusing degenerate initial state with {k} particle(s) on the floor; use degenerate-demo")]
    DegenerateRefusal { k: usize },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SINGULARITY: i32 = 3;
pub const EXIT_GUARD: i32 = 4;
pub const EXIT_INCONCLUSIVE: i32 = 5;
pub const EXIT_DEGENERATE: i32 = 6;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) | CliError::Csv(_) | CliError::Json(_) => EXIT_RUNTIME,
            CliError::Inconclusive(_) => EXIT_INCONCLUSIVE,
            CliError::DegenerateRefusal { .. } => EXIT_DEGENERATE,
            CliError::Run(e) => run_exit_code(e),
        }
    }

    pub fn status(&self) -> &'static str {
        status_name(self.exit_code())
    }
}

pub fn run_exit_code(e: &Error) -> i32 {
    match e {
        Error::Singularity { .. } => EXIT_SINGULARITY,
        Error::AccumulationGuard(_) => EXIT_GUARD,
        Error::Degenerate { .. } | Error::DegenerateInput(_) => EXIT_DEGENERATE,
        Error::Dimension { .. } | Error::InvalidMass(_) | Error::InvalidConfiguration(_) | Error::Index { .. } => {
            EXIT_CONFIG
        }
        Error::Contract(_) | Error::InternalConsistency(_) | Error::OracleUnreliable(_) => EXIT_RUNTIME,
    }
}

pub fn status_name(code: i32) -> &'static str {
    match code {
        EXIT_OK => "ok",
        EXIT_CONFIG => "config_error",
        EXIT_SINGULARITY => "singularity",
        EXIT_GUARD => "accumulation_guard",
        EXIT_INCONCLUSIVE => "inconclusive",
        EXIT_DEGENERATE => "degenerate_refused",
        _ => "runtime_error",
    }
}
