use thiserror::Error;

/// Everything that can go wrong while building, evaluating, differentiating or
/// emitting a relational plan.
#[derive(Debug, Error)]
pub enum Error {
    #[error("SchemaMismatch: {0}")]
    SchemaMismatch(String),
    #[error("UnknownColumn: no column `{0}` in schema")]
    UnknownColumn(String),
    #[error("NonzeroDefaults: both join operands have nonzero defaults ({0}, {1})")]
    NonzeroDefaults(f64, f64),
    #[error("Collision: two stored entries map to {0:?}")]
    Collision(Vec<i64>),
    #[error("DuplicateIndex: index tuple {0:?} stored twice")]
    DuplicateIndex(Vec<i64>),
    #[error("OutOfDomain: {0}")]
    OutOfDomain(String),
    #[error("EmptyRange: lo {lo} > hi {hi}")]
    EmptyRange { lo: i64, hi: i64 },
    #[error("DefaultConflict: empty groups would need different defaults ({0} vs {1})")]
    DefaultConflict(f64, f64),
    #[error("DivisorInvalid: divisor {0} < 1")]
    DivisorInvalid(i64),
    #[error("DomainError: {0}")]
    DomainError(String),
    #[error("TooLarge: dense size {size} exceeds cap {cap}")]
    TooLarge { size: usize, cap: usize },
    #[error("NonFinite: {0}")]
    NonFinite(String),
    #[error("OddExtent: {0}")]
    OddExtent(String),
    #[error("NotSquare: {0}")]
    NotSquare(String),
    #[error("NotBinary: entry {0:?} has value {1}")]
    NotBinary(Vec<i64>, f64),
    #[error("ShapeChainError: layer `{layer}`: {message}")]
    ShapeChain { layer: String, message: String },
    #[error("UnboundTarget: `{0}` is not an input of the tape")]
    UnboundTarget(String),
    #[error("MissingInput: {0}")]
    MissingInput(String),
    #[error("NonFiniteLoss: loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("UnsupportedNode: {0}")]
    UnsupportedNode(String),
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("Sql: {0}")]
    Sql(#[from] rusqlite::Error),
}

impl Error {
    /// The bare error kind, e.g. `"MissingInput"`, for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::NonzeroDefaults(..) => "NonzeroDefaults",
            Error::Collision(_) => "Collision",
            Error::DuplicateIndex(_) => "DuplicateIndex",
            Error::OutOfDomain(_) => "OutOfDomain",
            Error::EmptyRange { .. } => "EmptyRange",
            Error::DefaultConflict(..) => "DefaultConflict",
            Error::DivisorInvalid(_) => "DivisorInvalid",
            Error::DomainError(_) => "DomainError",
            Error::TooLarge { .. } => "TooLarge",
            Error::NonFinite(_) => "NonFinite",
            Error::OddExtent(_) => "OddExtent",
            Error::NotSquare(_) => "NotSquare",
            Error::NotBinary(..) => "NotBinary",
            Error::ShapeChain { .. } => "ShapeChainError",
            Error::UnboundTarget(_) => "UnboundTarget",
            Error::MissingInput(_) => "MissingInput",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::UnsupportedNode(_) => "UnsupportedNode",
            Error::InvalidParams(_) => "InvalidParams",
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::Json(_) => "Json",
            Error::Sql(_) => "Sql",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
