use crate::policy::PolicyId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("unsupported condition: {0}")]
    UnsupportedCondition(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policy {0} already exists")]
    Conflict(PolicyId),
    #[error("policy {0} not found")]
    NotFound(PolicyId),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("no guarded expression available for `{0}`; refusing to run unprotected")]
    EnforcementUnavailable(String),
    #[error("query has already been rewritten")]
    AlreadyRewritten,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
