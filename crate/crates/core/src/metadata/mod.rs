//! Structured music metadata and dataset record formats.
//!
//! [`MusicMetadata`] is the per-segment ground truth that flows between
//! pipeline stages and that the structured-thinking reward scores against.
//! [`DatasetRecord`] is one caption / QA / CoT training example. Records are
//! stored as JSONL shards with a manifest (see [`shard`]).

pub mod jsonl;
mod parse;
mod record;
pub mod shard;

pub use parse::{canonical_key, parse_key, parse_metadata};
pub use record::{
    format_bpm_text, parse_records, serialize_records, AudioRef, AuditEntry, Category, DatasetRecord, MusicMetadata,
    RecordKind, SourceSegment,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("record has no recognizable metadata categories")]
    EmptyRecord,
    #[error("record {record_id:?}: invalid field `{field}`: {reason}")]
    Validation {
        record_id: String,
        field: String,
        reason: String,
    },
}

impl RecordError {
    pub fn class_name(&self) -> &'static str {
        match self {
            RecordError::Parse(_) => "ParseError",
            RecordError::EmptyRecord => "EmptyRecord",
            RecordError::Validation { .. } => "ValidationError",
        }
    }
}
