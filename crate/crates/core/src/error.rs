use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: field `{field}` out of range ({value})")]
    Range {
        line: usize,
        field: &'static str,
        value: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{kind} {item} is not in this model's vocabulary")]
    Vocab { kind: &'static str, item: u32 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Training { epoch: usize, batch: usize, loss: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("user {user}: {source}")]
    User {
        user: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn for_user(self, user: impl Into<String>) -> Self {
        Error::User {
            user: user.into(),
            source: Box::new(self),
        }
    }
}
