use thiserror::Error;

/// Pipeline stage in which an error occurred. Drives the CLI exit code and
/// the single-line diagnostic (`error [stage]: ...`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Parse,
    Expand,
    Lower,
    Compile,
    Fit,
    Pred,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Parse => "parse",
            Stage::Expand => "expand",
            Stage::Lower => "lower",
            Stage::Compile => "compile",
            Stage::Fit => "fit",
            Stage::Pred => "pred",
        }
    }

    /// Exit code class: 2 for compile-time stages, 3 for runtime stages.
    pub fn exit_code(&self) -> i32 {
        match self {
            Stage::Parse | Stage::Expand | Stage::Lower | Stage::Compile => 2,
            Stage::Data | Stage::Fit | Stage::Pred => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("error [{}]: {msg}", stage.name())]
pub struct Error {
    pub stage: Stage,
    pub msg: String,
}

impl Error {
    pub fn new(stage: Stage, msg: impl Into<String>) -> Self {
        Error { stage, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::new(Stage::Data, msg)
    }

    pub fn parse_at(line: usize, col: usize, msg: impl std::fmt::Display) -> Self {
        Error::new(Stage::Parse, format!("{}:{}: {}", line, col, msg))
    }

    pub fn expand(msg: impl Into<String>) -> Self {
        Error::new(Stage::Expand, msg)
    }

    pub fn lower(msg: impl Into<String>) -> Self {
        Error::new(Stage::Lower, msg)
    }

    pub fn compile(msg: impl Into<String>) -> Self {
        Error::new(Stage::Compile, msg)
    }

    pub fn fit(msg: impl Into<String>) -> Self {
        Error::new(Stage::Fit, msg)
    }

    pub fn pred(msg: impl Into<String>) -> Self {
        Error::new(Stage::Pred, msg)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
