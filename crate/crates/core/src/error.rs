use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MerlError>;

#[derive(Debug, Error)]
pub enum MerlError {
    #[error("record {record_id}: lead {lead} has fewer than 6 finite samples")]
    UnrecoverableLead { record_id: String, lead: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("line {line}: label {label:?} is not in the label vocabulary")]
    Vocabulary { label: String, line: usize },

    #[error("duplicate record_id {0:?}")]
    DuplicateRecord(String),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch shape mismatch: {0}")]
    BatchShape(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("batch of size {0} is too small for a contrastive loss (need at least 2)")]
    BatchTooSmall(usize),

    #[error("non-finite similarity entries at {indices:?}")]
    NonFinite { indices: Vec<(usize, usize)> },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Divergence { epoch: usize, step: usize },

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("every class is undefined for AUC (no positives or no negatives)")]
    AllClassesUndefined,

    #[error("class {0:?} has an empty prompt")]
    EmptyPrompt(String),

    #[error("knowledge base {0:?} contains no terms")]
    EmptyKnowledgeBase(String),

    #[error("knowledge base has conflicting synonyms: {}", .0.join("; "))]
    KnowledgeBaseConflict(Vec<String>),

    #[error("could not parse LLM response: {message}")]
    LlmResponse { message: String, raw_response: String },

    #[error("LLM request failed: {0}")]
    LlmTransport(String),

    #[error("target labels covered by neither mapping nor drop list: {}", .0.join(", "))]
    TransferIncomplete(Vec<String>),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MerlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MerlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI error output.
    pub fn code(&self) -> &'static str {
        match self {
            MerlError::UnrecoverableLead { .. } => "unrecoverable_lead",
            MerlError::Parse { .. } => "parse",
            MerlError::Vocabulary { .. } => "vocabulary",
            MerlError::DuplicateRecord(_) => "duplicate_record",
            MerlError::EmptyManifest => "empty_manifest",
            MerlError::Config(_) => "config",
            MerlError::BatchShape(_) => "batch_shape",
            MerlError::Dimension(_) => "dimension",
            MerlError::BatchTooSmall(_) => "batch_too_small",
            MerlError::NonFinite { .. } => "non_finite",
            MerlError::Divergence { .. } => "divergence",
            MerlError::Capability(_) => "capability",
            MerlError::AllClassesUndefined => "all_classes_undefined",
            MerlError::EmptyPrompt(_) => "empty_prompt",
            MerlError::EmptyKnowledgeBase(_) => "empty_kb",
            MerlError::KnowledgeBaseConflict(_) => "kb_conflict",
            MerlError::LlmResponse { .. } => "llm_response",
            MerlError::LlmTransport(_) => "llm_transport",
            MerlError::TransferIncomplete(_) => "transfer_incomplete",
            MerlError::ProtocolViolation(_) => "protocol_violation",
            MerlError::Checkpoint(_) => "checkpoint",
            MerlError::Io { .. } => "io",
            MerlError::Json(_) => "json",
            MerlError::Csv(_) => "csv",
        }
    }
}
