use std::path::PathBuf;

use thiserror::Error;

use crate::datamodel::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: I/O error: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message} (near `{fragment}`)")]
    Parse {
        line: usize,
        fragment: String,
        message: String,
    },

    #[error("trace `{sample_id}` is invalid: {}", join_violations(.violations))]
    InvalidTrace {
        sample_id: String,
        violations: Vec<Violation>,
    },

    #[error("invalid record `{sample_id}`: {reason}")]
    InvalidRecord { sample_id: String, reason: String },

    #[error("duplicate sample_id `{0}`")]
    DuplicateSampleId(String),

    #[error("empty response has no mean")]
    EmptyScores,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("texts differ, cannot align (first divergence at byte {offset})")]
    TextMismatch { offset: usize },

    #[error("no span match before sequences were exhausted (source token {source_pos}, target token {target_pos})")]
    AlignmentExhausted {
        source_pos: usize,
        target_pos: usize,
    },

    #[error("record `{sample_id}`: {source}")]
    Record {
        sample_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("tokenizer `{tag}`: {message}")]
    Tokenizer { tag: String, message: String },

    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),

    #[error("symbol {symbol:?} is outside the model vocabulary")]
    OutOfVocab { symbol: String },

    #[error("template: {0}")]
    Template(String),

    #[error("generator: {0}")]
    Generator(String),

    #[error(
        "admission starved: {accepted} of {target} samples accepted after {attempts} attempts \
         ({duplicate} duplicate, {rouge} rouge, {empty} empty)"
    )]
    Starvation {
        target: usize,
        accepted: usize,
        attempts: usize,
        duplicate: usize,
        rouge: usize,
        empty: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("model file: {0}")]
    ModelFormat(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_record(sample_id: &str, source: Error) -> Self {
        Error::Record {
            sample_id: sample_id.to_string(),
            source: Box::new(source),
        }
    }
}
