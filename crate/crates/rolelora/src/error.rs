use std::io;
use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: line {line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("no manifest in {}", .0.display())]
    MissingManifest(PathBuf),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("digest mismatch for {0}")]
    DigestMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{failed} gradient checks exceeded the tolerance")]
    GradCheck { failed: usize },
    #[error(transparent)]
    Core(#[from] rolelora_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, err: impl ToString) -> CliError {
        CliError::Parse { path: path.into(), line, message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::MissingManifest(_) => "missing_manifest",
            CliError::Version { .. } => "format_version",
            CliError::DigestMismatch(_) => "digest_mismatch",
            CliError::Invalid(_) => "invalid_input",
            CliError::GradCheck { .. } => "gradient_check",
            CliError::Core(e) => core_kind(e),
        }
    }

    /// 2 invalid input, 3 training failure, 4 I/O or digest failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. }
            | CliError::MissingManifest(_)
            | CliError::Version { .. }
            | CliError::DigestMismatch(_) => 4,
            CliError::Parse { .. } | CliError::Invalid(_) => 2,
            CliError::GradCheck { .. } => 3,
            CliError::Core(e) => core_exit_code(e),
        }
    }

    /// One JSON object per line for scripts to parse.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Line { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() })
            .expect("plain strings serialise")
    }
}

fn core_kind(e: &rolelora_core::Error) -> &'static str {
    use rolelora_core::Error::*;
    match e {
        InvalidArgument(_) => "invalid_argument",
        OracleFailure { .. } => "oracle_failure",
        NoRoles => "no_roles",
        Conflict(_) => "conflict",
        Unsupported(_) => "unsupported",
        TrainingFailure(_) => "training_failure",
        AtTurn { source, .. } => core_kind(source),
    }
}

fn core_exit_code(e: &rolelora_core::Error) -> i32 {
    use rolelora_core::Error::*;
    match e {
        TrainingFailure(_) | OracleFailure { .. } => 3,
        AtTurn { source, .. } => core_exit_code(source),
        _ => 2,
    }
}
