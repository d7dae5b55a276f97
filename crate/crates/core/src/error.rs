use std::collections::BTreeMap;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not enough candidates: requested {requested}, pool has {available}")]
    InsufficientPool { requested: usize, available: usize },

    #[error("not enough items for {strategy}: need {needed} {class}, have {available}")]
    InsufficientItems {
        strategy: String,
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("length balance check failed after {attempts} attempts (last p = {p})")]
    BalanceGateFailed { attempts: usize, p: f64 },

    #[error("conflicting labels for posts: {}", .0.join(", "))]
    UnresolvedConflict(Vec<String>),

    #[error("annotation references unknown post {0}")]
    UnknownPost(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("corpus has no terms")]
    EmptyVocabulary,

    #[error("SMOTE needs at least 2 minority points and k < minority size (got {minority} points, k = {k}, target {target})")]
    TooFewMinority {
        minority: usize,
        k: usize,
        target: usize,
    },

    #[error("training labels contain a single class")]
    DegenerateLabels,

    #[error("bad input: {0}")]
    BadInput(String),

    #[error("need at least {k} items for {k}-fold split, got {n}")]
    TooFewForFolds { n: usize, k: usize },

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: file not found")]
    NotFound { path: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[cfg(feature = "sqlite")]
    #[error("sqlite import: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

impl Error {
    /// Stable machine-readable code, used in CLI output and service errors.
    pub fn code(&self) -> String {
        match self {
            Error::InsufficientPool { .. } => "insufficient_pool".into(),
            Error::InsufficientItems { .. } => "insufficient_items".into(),
            Error::BalanceGateFailed { .. } => "balance_gate_failed".into(),
            Error::UnresolvedConflict(_) => "unresolved_conflict".into(),
            Error::UnknownPost(_) => "unknown_post".into(),
            Error::Validation(_) => "validation".into(),
            Error::EmptyVocabulary => "empty_vocabulary".into(),
            Error::TooFewMinority { .. } => "too_few_minority".into(),
            Error::DegenerateLabels => "degenerate_labels".into(),
            Error::BadInput(_) => "bad_input".into(),
            Error::TooFewForFolds { .. } => "too_few_items".into(),
            Error::EmptyConfusion => "empty_confusion".into(),
            Error::Fold { source, .. } => source.code(),
            Error::Stage { stage, source } => format!("{stage}:{}", source.code()),
            Error::NotFound { .. } => "not_found".into(),
            Error::Config(_) => "config".into(),
            Error::Io { .. } => "io".into(),
            Error::Json { .. } => "json".into(),
            #[cfg(feature = "sqlite")]
            Error::Sqlite(_) => "sqlite".into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Error {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Error {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// The innermost error, skipping stage and fold wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } | Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Counts keyed by reason code, used by reports that tally rejections.
pub type ReasonCounts = BTreeMap<String, usize>;
