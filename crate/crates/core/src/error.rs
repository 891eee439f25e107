use std::path::PathBuf;

use thiserror::Error;

use crate::gateway::SchemaId;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("read failed at line {line}: {source}")]
    Read {
        line: usize,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "{malformed} of {total} lines malformed (more than half); first bad lines: {sample:?}"
    )]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        sample: Vec<usize>,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error(
        "item pool too small: {eligible} eligible negatives for user {user_id}, need {needed}"
    )]
    PoolTooSmall {
        user_id: String,
        eligible: usize,
        needed: usize,
    },
    #[error("target index {target} outside history of length {len}")]
    TargetOutOfRange { target: usize, len: usize },
    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid method: {0}")]
    InvalidMethod(String),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{schema} response failed validation after {attempts} attempts: {violation}")]
    ParseExhausted {
        schema: SchemaId,
        attempts: u32,
        violation: String,
        last_raw: String,
        /// Input tokens of the first attempt, as for a successful call.
        prompt_tokens: u64,
    },
    #[error("backend unavailable after {attempts} attempts: {message}")]
    BackendUnavailable { attempts: u32, message: String },
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("in-context prompt needs at least 2 observed interactions, got {0}")]
    IclHistoryTooShort(usize),
    #[error("baseline prompts cannot use the extractor")]
    ExtractorInBaseline,
    #[error("candidate slate must hold 20 items, got {0}")]
    SlateSize(usize),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint for user {user_id} written out of order: version {version} after {last}")]
    OutOfOrder {
        user_id: String,
        version: u32,
        last: u32,
    },
    #[error("checkpoint versions for user {user_id} have a gap before version {missing}")]
    VersionGap { user_id: String, missing: u32 },
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("user {user_id}: {source}")]
    Backend {
        user_id: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("history for user {user_id} has {len} interactions, need at least {needed}")]
    HistoryTooShort {
        user_id: String,
        len: usize,
        needed: usize,
    },
}
