//! The annotation pipeline: initial captions, metadata extraction, detailed
//! caption and QA creation, quality filtering and the CoT ("think") build,
//! plus the caption-rewrite and option-augmentation refinements.
//!
//! Every stage maps items (segments or records) to outputs with at most
//! `workers` items in flight, checkpointing after each batch so a failed run
//! can resume without repeating finished work. Outputs are ordered by
//! record id, so a run under the mock provider is byte-reproducible.

mod checkpoint;
mod corpus;
mod extract;
mod job;
mod stages;
mod think;

#[cfg(test)]
mod tests;

use std::path::PathBuf;

use thiserror::Error;

use crate::audio::AudioError;
use crate::metadata::shard::ShardError;
use crate::metadata::RecordError;
use crate::provider::ProviderError;

pub use corpus::{load_corpus, CorpusClip, CorpusManifest, SegmentRef};
pub use extract::{extract_clip, extract_metadata, SegmentMetadata};
pub use job::{run_job, JobReport, PipelineJob, ProviderConfig, ProviderKind, Stage, StageReport};
pub use stages::{
    augment_all, augment_options, create_caption_and_qa, mean_caption_words, quality_filter, rewrite_caption,
    rewrite_captions, select_hard_examples, synthesize_initial_captions, Dropped, StageContext, StageOutput,
    CAPTION_PROMPT, MIN_OPTIONS, SKILLS,
};
pub use think::{build_think, split_steps, think_one, CotRecord, Disposition, StepVerdict, FAIL_THRESHOLD, SFT_INSTRUCTION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audio {path}: {source}")]
    Audio {
        path: String,
        #[source]
        source: AudioError,
    },
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("provider failed on {item}: {source}")]
    Provider {
        item: String,
        #[source]
        source: ProviderError,
    },
    #[error("rewrite of {record_id} is inconsistent with metadata: {reason}")]
    RewriteInconsistent { record_id: String, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl PipelineError {
    pub fn class_name(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigError",
            PipelineError::Io { .. } => "IoError",
            PipelineError::Audio { source, .. } => source.class_name(),
            PipelineError::Shard(e) => e.class_name(),
            PipelineError::Record(e) => e.class_name(),
            PipelineError::Provider { source, .. } => source.class_name(),
            PipelineError::RewriteInconsistent { .. } => "RewriteInconsistent",
            PipelineError::InvalidInput(_) => "InvalidInput",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| PipelineError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
