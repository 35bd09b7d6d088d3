use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate doc_id `{0}`")]
    DuplicateDoc(String),

    #[error("document `{0}` has an empty title")]
    EmptyTitle(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("query needs {needed} tokens with BOS/EOS but max_len is {max_len}")]
    QueryTooLong { needed: usize, max_len: usize },

    #[error("empty query")]
    EmptyQuery,

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss")]
    NonFinite,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
