use crate::corpus::CorpusError;
use crate::decompose::DecomposeError;
use crate::detector::DetectError;
use crate::hdfs::ConvertError;
use crate::hierarchy::HierarchyError;
use crate::kb::KbError;
use crate::llm::{FixtureError, LlmError};
use crate::metrics::EvalError;

/// Union of the module errors, for callers that drive several stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable name of the error variant, used by the CLI and HTTP error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Corpus(e) => e.code(),
            Error::Hierarchy(e) => e.code(),
            Error::Decompose(e) => e.code(),
            Error::Kb(e) => e.code(),
            Error::Detect(e) => e.code(),
            Error::Eval(e) => e.code(),
            Error::Llm(_) => "LlmUnavailable",
            Error::Fixture(_) => "MalformedFixture",
            Error::Convert(_) => "ConvertError",
            Error::Io(_) => "IoError",
        }
    }
}
