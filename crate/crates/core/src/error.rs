use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::DatasetId;

pub type Result<T, E = LiftError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LiftError {
    // corpus
    #[error("label {label:?} is not declared for dataset {dataset}")]
    UnknownLabel { dataset: DatasetId, label: String },
    #[error("record has empty text")]
    EmptyText,
    #[error("record is missing field {0:?}")]
    MissingField(String),
    #[error("unparseable timestamp {0:?}")]
    BadTimestamp(String),

    // builder
    #[error("index {index} out of range for timeline of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("header and current item need {needed} tokens, budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("{0} is evaluation-only and has no curriculum stage")]
    NotACurriculumDataset(DatasetId),

    // tokenspace
    #[error("token at bytes {start}..{end} straddles a region boundary")]
    SpanAlignment { start: usize, end: usize },

    // model
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint {field} {found} does not match {expected}")]
    CheckpointMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    VocabOverflow { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("no adapter targets matched in model")]
    NoTargetsFound,
    #[error("cannot grow rank from {from} to {to}")]
    RankShrink { from: usize, to: usize },
    #[error("layer {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    // objectives / training
    #[error("no stamped output position")]
    NoStampedPosition,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at stage {stage} step {step}; state dumped to {dump:?}")]
    NonFiniteLoss {
        stage: u8,
        step: usize,
        dump: Option<PathBuf>,
    },
    #[error("shard is empty")]
    EmptyShard,
    #[error("missing shard or checkpoint for stage {0}")]
    MissingStageShard(u8),

    // interp
    #[error("class {class} has {support} examples, need at least {needed}")]
    InsufficientClassSupport {
        class: u32,
        support: usize,
        needed: usize,
    },
    #[error("model did not return attention weights")]
    NoAttentionCapture,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LiftError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LiftError::Io {
            path: path.into(),
            source,
        }
    }
}
