use thiserror::Error;

/// Errors raised by the library, qualified by the module that produced them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("parse: line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("hmm: {0}")]
    Hmm(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("sampler: non-finite log-likelihood at iteration {iteration}, gene {gene}")]
    NonFinite { iteration: usize, gene: String },
    #[error("detect: {0}")]
    Detect(String),
    #[error("modelsel: {0}")]
    ModelSel(String),
    #[error("modelsel: model {model}: {inner}")]
    Model { model: String, inner: Box<Error> },
    #[error("simulate: {0}")]
    Simulate(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("io: {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
