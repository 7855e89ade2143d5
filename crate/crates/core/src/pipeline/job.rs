use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::corpus::load_corpus;
use super::extract::{extract_metadata, SegmentMetadata};
use super::stages::{
    create_caption_and_qa, mean_caption_words, quality_filter, select_hard_examples, synthesize_initial_captions,
    StageContext, StageOutput,
};
use super::think::{build_think, Disposition};
use super::{PipelineError, Result};
use crate::metadata::jsonl::{read_rows, write_rows};
use crate::metadata::shard::{read_shards, write_shards, MANIFEST_FILE};
use crate::metadata::DatasetRecord;
use crate::provider::{HttpTransport, MockProvider, ProviderClient, Transport, DEFAULT_MAX_IN_FLIGHT};

pub const SHARD_SIZE: usize = 1000;
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synthesize,
    Extract,
    Create,
    Filter,
    Think,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synthesize, Stage::Extract, Stage::Create, Stage::Filter, Stage::Think];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthesize => "synthesize",
            Stage::Extract => "extract",
            Stage::Create => "create",
            Stage::Filter => "filter",
            Stage::Think => "think",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name.trim())
    }

    fn needs_corpus(self) -> bool {
        matches!(self, Stage::Synthesize | Stage::Extract)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderKind {
    Mock,
    Http { url: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Mock, cache_dir: None, max_in_flight: DEFAULT_MAX_IN_FLIGHT }
    }
}

impl ProviderConfig {
    /// Build a client; the mock is seeded with `seed`.
    pub fn build(&self, seed: u64) -> Result<ProviderClient> {
        let transport: Arc<dyn Transport> = match &self.kind {
            ProviderKind::Mock => Arc::new(MockProvider::new(seed)),
            ProviderKind::Http { url } => Arc::new(HttpTransport::new(url)),
        };
        let client = ProviderClient::new(transport).with_max_in_flight(self.max_in_flight);
        match &self.cache_dir {
            Some(dir) => client.with_cache_dir(dir).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(client),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineJob {
    pub corpus_manifest: Option<PathBuf>,
    pub stages: Vec<Stage>,
    pub provider: ProviderConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub workers: usize,
    pub window_sec: f64,
    pub hop_sec: f64,
    pub transcribe: bool,
}

impl PipelineJob {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_manifest: None,
            stages: Stage::ALL.to_vec(),
            provider: ProviderConfig::default(),
            seed: 0,
            output_dir: output_dir.into(),
            batch_size: 64,
            workers: 1,
            window_sec: 30.0,
            hop_sec: 30.0,
            transcribe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(PipelineError::Config("no stages".into()));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::Config(format!(
                "stages must be distinct and in order {:?}",
                Stage::ALL.map(Stage::name)
            )));
        }
        if self.stages.iter().any(|s| s.needs_corpus()) && self.corpus_manifest.is_none() {
            return Err(PipelineError::Config("synthesize and extract need a corpus manifest".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be at least 1".into()));
        }
        if !(self.window_sec > 0.0 && self.hop_sec > 0.0 && self.hop_sec <= self.window_sec) {
            return Err(PipelineError::Config("need 0 < hop_sec <= window_sec".into()));
        }
        Ok(())
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.output_dir.join(stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub inputs: usize,
    pub outputs: usize,
    pub dropped: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobReport {
    pub stages: Vec<StageReport>,
    pub mean_caption_words: Option<f64>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(PipelineError::io(path))
}

fn write_output(dir: &Path, out: &StageOutput) -> Result<()> {
    write_shards(dir, "records", &out.records, SHARD_SIZE)?;
    write_file(&dir.join("dropped.jsonl"), &write_rows(&out.dropped))?;
    write_file(&dir.join("flagged.txt"), out.flagged.iter().map(|f| format!("{f}\n")).collect::<String>().as_bytes())
}

fn read_stage(job: &PipelineJob, stage: &str) -> Result<Vec<DatasetRecord>> {
    let manifest = job.stage_dir(stage).join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(PipelineError::InvalidInput(format!("no {stage} output at {}", manifest.display())));
    }
    Ok(read_shards(&manifest)?)
}

fn report(stage: Stage, inputs: usize, out: &StageOutput) -> StageReport {
    StageReport {
        stage: stage.name().into(),
        inputs,
        outputs: out.records.len(),
        dropped: out.dropped.len(),
        flagged: out.flagged.len(),
    }
}

/// Run the job's stages in order. Each stage reads its inputs from the
/// previous stage's directory under `output_dir`, so a job may start at
/// any stage whose inputs already exist.
pub fn run_job(job: &PipelineJob, client: &ProviderClient) -> Result<JobReport> {
    job.validate()?;
    let ctx = StageContext {
        client: Some(client),
        seed: job.seed,
        batch_size: job.batch_size,
        workers: job.workers,
        checkpoint_dir: Some(job.output_dir.join(CHECKPOINT_DIR)),
        transcribe: job.transcribe,
    };
    let segments = match &job.corpus_manifest {
        Some(path) if job.stages.iter().any(|s| s.needs_corpus()) => load_corpus(path, job.window_sec, job.hop_sec)?,
        _ => Vec::new(),
    };
    let mut reports = Vec::new();
    let mut mean_words = None;
    for &stage in &job.stages {
        log::info!("stage {} starting", stage.name());
        let dir = job.stage_dir(stage.name());
        match stage {
            Stage::Synthesize => {
                let refs: Vec<_> = segments.iter().map(|(s, _)| s.clone()).collect();
                let records = synthesize_initial_captions(&refs, &ctx)?;
                let out = StageOutput { records, ..Default::default() };
                write_output(&dir, &out)?;
                reports.push(report(stage, refs.len(), &out));
            }
            Stage::Extract => {
                let rows = extract_metadata(&segments, &ctx)?;
                write_file(&dir.join("metadata.jsonl"), &write_rows(&rows))?;
                reports.push(StageReport {
                    stage: stage.name().into(),
                    inputs: segments.len(),
                    outputs: rows.len(),
                    dropped: 0,
                    flagged: rows.iter().filter(|r| r.audit.iter().any(|a| !a.passed)).count(),
                });
            }
            Stage::Create => {
                let initial = read_stage(job, Stage::Synthesize.name())?;
                let path = job.stage_dir(Stage::Extract.name()).join("metadata.jsonl");
                let bytes = std::fs::read(&path).map_err(PipelineError::io(&path))?;
                let rows: Vec<SegmentMetadata> = read_rows(&bytes)?;
                let out = create_caption_and_qa(&initial, &rows, &ctx)?;
                mean_words = mean_caption_words(&out.records);
                write_output(&dir, &out)?;
                reports.push(report(stage, rows.len(), &out));
            }
            Stage::Filter => {
                let input = read_stage(job, Stage::Create.name())?;
                let out = quality_filter(&input, &ctx)?;
                write_output(&dir, &out)?;
                reports.push(report(stage, input.len(), &out));
            }
            Stage::Think => {
                let input = read_stage(job, Stage::Filter.name())?;
                let hard = select_hard_examples(&input, &ctx)?;
                write_output(&job.stage_dir("select"), &hard)?;
                let mut select_report = report(stage, input.len(), &hard);
                select_report.stage = "select".into();
                reports.push(select_report);
                let chains = build_think(&hard.records, &ctx)?;
                write_file(&dir.join("cot_records.jsonl"), &write_rows(&chains))?;
                let kept: Vec<DatasetRecord> = chains
                    .iter()
                    .filter(|c| c.disposition != Disposition::Discarded)
                    .map(|c| c.base.clone())
                    .collect();
                write_shards(&dir, "records", &kept, SHARD_SIZE)?;
                reports.push(StageReport {
                    stage: stage.name().into(),
                    inputs: hard.records.len(),
                    outputs: kept.len(),
                    dropped: chains.len() - kept.len(),
                    flagged: 0,
                });
            }
        }
    }
    let report = JobReport { stages: reports, mean_caption_words: mean_words };
    let mut text = serde_json::to_vec_pretty(&report).expect("report serializes");
    text.push(b'\n');
    write_file(&job.output_dir.join("report.json"), &text)?;
    Ok(report)
}
