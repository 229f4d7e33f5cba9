use std::fmt;

use attnsplat::Error;

/// Process exit status for a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad arguments or unreadable inputs.
    Validation = 1,
    /// The computation itself failed.
    Runtime = 2,
}

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub stage: &'static str,
    pub message: String,
}

impl Failure {
    pub fn validation(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            stage,
            message: message.into(),
        }
    }

    pub fn runtime(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Runtime,
            stage,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

fn kind_of(e: &Error) -> Kind {
    match e {
        Error::Degenerate(_) | Error::Reconstruction(_) | Error::NonFinite { .. } => Kind::Runtime,
        _ => Kind::Validation,
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a stage name to library results.
pub trait Stage<T> {
    /// Classifies by error variant: numerical and reconstruction failures are
    /// runtime failures, everything else is a validation failure.
    fn stage(self, stage: &'static str) -> CliResult<T>;
    /// Always a runtime failure, for writing outputs.
    fn runtime(self, stage: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for Result<T, Error> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure {
            kind: kind_of(&e),
            stage,
            message: e.to_string(),
        })
    }

    fn runtime(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::runtime(stage, e.to_string()))
    }
}

impl<T> Stage<T> for std::io::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::validation(stage, e.to_string()))
    }

    fn runtime(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::runtime(stage, e.to_string()))
    }
}
