use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::run_batched;
use super::corpus::SegmentRef;
use super::extract::SegmentMetadata;
use super::{PipelineError, Result};
use crate::metadata::shard::sha256_hex;
use crate::metadata::{format_bpm_text, AuditEntry, DatasetRecord, MusicMetadata, RecordKind};
use crate::provider::templates::*;
use crate::provider::{ProviderClient, ProviderRequest, ProviderResponse, Role, Verdict};

/// The five QA skills as (record-id slug, name).
pub const SKILLS: [(&str, &str); 5] = [
    ("temporal", "Temporal understanding"),
    ("attribute", "Attribute identification"),
    ("harmonic", "Harmonic & theoretical analysis"),
    ("lyric", "Lyric and vocal grounding"),
    ("structural", "Comparative and structural reasoning"),
];

pub const CAPTION_PROMPT: &str = "Describe this music in detail: tempo and key, instrumentation and production, \
lyrics and vocals, song structure and dynamics, harmony, and the overall mood.";
pub const INITIAL_PROMPT: &str = "Briefly describe this music.";

/// Option count augmentation aims for.
pub const MIN_OPTIONS: usize = 8;

/// Shared settings for one stage run.
#[derive(Clone)]
pub struct StageContext<'a> {
    pub client: Option<&'a ProviderClient>,
    pub seed: u64,
    pub batch_size: usize,
    pub workers: usize,
    /// Where per-stage checkpoint files live; `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    pub transcribe: bool,
}

impl<'a> StageContext<'a> {
    pub fn new(client: Option<&'a ProviderClient>, seed: u64) -> Self {
        Self { client, seed, batch_size: 64, workers: 1, checkpoint_dir: None, transcribe: false }
    }

    pub(crate) fn workers(&self) -> usize {
        let cap = self.client.map_or(usize::MAX, ProviderClient::max_in_flight);
        self.workers.clamp(1, cap.max(1))
    }

    pub(crate) fn client(&self) -> Result<&'a ProviderClient> {
        self.client.ok_or_else(|| PipelineError::Config("this stage needs a provider".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub record_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub records: Vec<DatasetRecord>,
    pub dropped: Vec<Dropped>,
    /// Records kept but marked for manual review.
    pub flagged: Vec<String>,
}

impl StageOutput {
    fn merge(parts: Vec<StageOutput>) -> Self {
        let mut out = StageOutput::default();
        for p in parts {
            out.records.extend(p.records);
            out.dropped.extend(p.dropped);
            out.flagged.extend(p.flagged);
        }
        out.records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        out.dropped.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        out.flagged.sort();
        out
    }

    fn drop(stage: &str, record_id: &str, reason: impl Into<String>) -> Self {
        StageOutput {
            dropped: vec![Dropped { record_id: record_id.to_owned(), stage: stage.to_owned(), reason: reason.into() }],
            ..Default::default()
        }
    }
}

fn send(client: &ProviderClient, item: &str, req: &ProviderRequest) -> Result<ProviderResponse> {
    client.send(req).map_err(|source| PipelineError::Provider { item: item.to_owned(), source })
}

/// Per-record RNG derived from the job seed.
pub(crate) fn record_rng(seed: u64, record_id: &str) -> ChaCha8Rng {
    let h = sha256_hex(record_id.as_bytes());
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_str_radix(&h[..16], 16).expect("hex digest"))
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// `(X) text` → (index of X, text).
fn split_option(line: &str) -> Option<(usize, &str)> {
    let rest = line.trim().strip_prefix('(')?;
    let mut chars = rest.chars();
    let l = chars.next()?;
    if !l.is_ascii_uppercase() {
        return None;
    }
    let text = chars.as_str().strip_prefix(')')?.trim();
    Some(((l as u8 - b'A') as usize, text))
}

pub(crate) fn qa_prompt(question: &str, options: &[String]) -> String {
    let mut p = question.trim().to_owned();
    for (i, o) in options.iter().enumerate() {
        p.push_str(&format!("\n({}) {o}", letter(i)));
    }
    p
}

fn question_of(prompt: &str) -> String {
    prompt
        .lines()
        .take_while(|l| split_option(l).is_none())
        .collect::<Vec<_>>()
        .join("\n")
}

fn qa_target(options: &[String], answer: usize) -> String {
    format!("({}) {}", letter(answer), options[answer])
}

/// Parse `Question: ... / (A) ... / Answer: (X)` provider output.
fn parse_qa(text: &str) -> std::result::Result<(String, Vec<String>, usize), String> {
    let mut question = Vec::new();
    let mut options = Vec::new();
    let mut answer = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(a) = line.strip_prefix("Answer:") {
            let a = a.trim().trim_start_matches('(');
            answer = a.chars().next().filter(char::is_ascii_uppercase).map(|c| (c as u8 - b'A') as usize);
        } else if let Some((i, o)) = split_option(line) {
            if i != options.len() {
                return Err(format!("option ({}) out of sequence", letter(i)));
            }
            options.push(o.to_owned());
        } else if options.is_empty() {
            question.push(line.strip_prefix("Question:").unwrap_or(line).trim());
        }
    }
    let question = question.join(" ");
    if question.is_empty() {
        return Err("no question".into());
    }
    if options.len() < 2 {
        return Err(format!("{} options", options.len()));
    }
    match answer {
        Some(a) if a < options.len() => Ok((question, options, a)),
        _ => Err("missing or out-of-range answer".into()),
    }
}

/// Stage 1: one short caption per segment.
pub fn synthesize_initial_captions(segments: &[SegmentRef], ctx: &StageContext) -> Result<Vec<DatasetRecord>> {
    const STAGE: &str = "synthesize";
    let client = ctx.client()?;
    let mut records = run_batched(ctx, STAGE, segments, |s| s.segment_id.clone(), |seg| {
        let req = ProviderRequest::new(Role::Captioner, INITIAL_CAPTION)
            .var("segment", seg.segment_id.clone())
            .audio(seg.provider_audio());
        let text = send(client, &seg.segment_id, &req)?.text.trim().to_owned();
        let record = DatasetRecord {
            record_id: format!("{}/initial", seg.segment_id),
            kind: RecordKind::Caption,
            audio_ref: seg.audio_ref(),
            skill: None,
            prompt: INITIAL_PROMPT.into(),
            target: text,
            options: None,
            answer_index: None,
            think: None,
            metadata: MusicMetadata::default(),
            stage_audit: vec![AuditEntry::pass(STAGE, "")],
        };
        record.validate()?;
        Ok(record)
    })?;
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(records)
}

#[derive(Serialize)]
struct CreateInput<'a> {
    segment_id: &'a str,
    initial: Option<&'a DatasetRecord>,
    metadata: Option<&'a SegmentMetadata>,
}

/// Stage 3: a detailed caption and one QA per skill for each segment.
pub fn create_caption_and_qa(
    initial: &[DatasetRecord],
    metadata: &[SegmentMetadata],
    ctx: &StageContext,
) -> Result<StageOutput> {
    const STAGE: &str = "create";
    let client = ctx.client()?;
    let mut joined: BTreeMap<&str, CreateInput> = BTreeMap::new();
    for m in metadata {
        joined
            .entry(&m.segment_id)
            .or_insert(CreateInput { segment_id: &m.segment_id, initial: None, metadata: None })
            .metadata = Some(m);
    }
    for r in initial {
        let seg = r.segment_id();
        joined.entry(seg).or_insert(CreateInput { segment_id: seg, initial: None, metadata: None }).initial = Some(r);
    }
    let inputs: Vec<CreateInput> = joined.into_values().collect();
    let parts = run_batched(ctx, STAGE, &inputs, |i| i.segment_id.to_owned(), |input| {
        let seg = input.segment_id;
        let (Some(initial), Some(meta)) = (input.initial, input.metadata) else {
            let missing = if input.initial.is_none() { "initial caption" } else { "metadata" };
            return Ok(StageOutput::drop(STAGE, seg, format!("missing {missing}")));
        };
        let block = meta.metadata.to_block();
        let mut audit = initial.stage_audit.clone();
        audit.extend(meta.audit.iter().cloned());
        audit.push(AuditEntry::pass(STAGE, ""));
        let base = DatasetRecord {
            record_id: format!("{seg}/caption"),
            kind: RecordKind::Caption,
            audio_ref: meta.audio_ref.clone(),
            skill: None,
            prompt: CAPTION_PROMPT.into(),
            target: String::new(),
            options: None,
            answer_index: None,
            think: None,
            metadata: meta.metadata.clone(),
            stage_audit: audit,
        };
        let mut out = StageOutput::default();
        let req = ProviderRequest::new(Role::QaGenerator, DETAILED_CAPTION)
            .var("metadata", block.clone())
            .var("initial_caption", initial.target.clone());
        let caption = send(client, seg, &req)?.text.trim().to_owned();
        let record = DatasetRecord { target: caption.clone(), ..base.clone() };
        match record.validate() {
            Ok(()) => out.records.push(record),
            Err(e) => out.dropped.push(Dropped { record_id: record.record_id, stage: STAGE.into(), reason: e.to_string() }),
        }
        for (slug, skill) in SKILLS {
            let record_id = format!("{seg}/qa/{slug}");
            let req = ProviderRequest::new(Role::QaGenerator, QA_GENERATION)
                .var("skill", skill)
                .var("metadata", block.clone())
                .var("caption", caption.clone());
            let text = send(client, &record_id, &req)?.text;
            let record = parse_qa(&text).map(|(question, options, answer)| DatasetRecord {
                record_id: record_id.clone(),
                kind: RecordKind::Qa,
                skill: Some(skill.to_owned()),
                prompt: qa_prompt(&question, &options),
                target: qa_target(&options, answer),
                options: Some(options),
                answer_index: Some(answer),
                ..base.clone()
            });
            match record.map_err(|e| format!("unparseable QA: {e}")).and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string())) {
                Ok(r) => out.records.push(r),
                Err(reason) => out.dropped.push(Dropped { record_id, stage: STAGE.into(), reason }),
            }
        }
        Ok(out)
    })?;
    let out = StageOutput::merge(parts);
    if let Some(mean) = mean_caption_words(&out.records) {
        log::info!("create: mean caption length {mean:.2} words over {} captions", out.records.iter().filter(|r| r.kind == RecordKind::Caption).count());
    }
    Ok(out)
}

/// Mean whitespace-separated word count over caption records.
pub fn mean_caption_words(records: &[DatasetRecord]) -> Option<f64> {
    let counts: Vec<usize> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Caption)
        .map(|r| r.target.split_whitespace().count())
        .collect();
    (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Numbers written directly before "BPM" (or fused, as in "120bpm").
fn bpm_mentions(text: &str) -> Vec<f64> {
    let words: Vec<String> = text
        .split(|c: char| c.is_whitespace() || ",;:()[]\"'~".contains(c))
        .map(|w| w.trim_end_matches(['.', '!', '?']).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if w == "bpm" {
            if let Some(n) = i.checked_sub(1).and_then(|j| words[j].parse().ok()) {
                out.push(n);
            }
        } else if let Some(n) = w.strip_suffix("bpm").and_then(|p| p.parse().ok()) {
            out.push(n);
        }
    }
    out
}

fn check_consistency(text: &str, meta: &MusicMetadata) -> std::result::Result<(), String> {
    if let Some(bpm) = meta.bpm {
        let mentions = bpm_mentions(text);
        if mentions.is_empty() {
            return Err(format!("tempo {} BPM not stated", format_bpm_text(bpm)));
        }
        if let Some(m) = mentions.iter().find(|&&m| m != bpm && m != bpm.round()) {
            return Err(format!("states {m} BPM, metadata has {}", format_bpm_text(bpm)));
        }
    }
    if let Some(key) = meta.key.as_deref().filter(|k| !k.trim().is_empty()) {
        if !text.to_lowercase().contains(&key.to_lowercase()) {
            return Err(format!("key {key} not stated"));
        }
    }
    Ok(())
}

/// Rewrite a caption against metadata, adding lyric content and fixing
/// tempo/key claims. The result must state the metadata's BPM and key.
pub fn rewrite_caption(existing: &DatasetRecord, metadata: &MusicMetadata, client: &ProviderClient) -> Result<DatasetRecord> {
    const STAGE: &str = "rewrite";
    if existing.kind != RecordKind::Caption {
        return Err(PipelineError::InvalidInput(format!("{} is not a caption", existing.record_id)));
    }
    let req = ProviderRequest::new(Role::QaGenerator, CAPTION_CORRECTION)
        .var("metadata", metadata.to_block())
        .var("lyrics", metadata.lyrics.clone().unwrap_or_default())
        .var("caption", existing.target.clone());
    let text = send(client, &existing.record_id, &req)?.text.trim().to_owned();
    check_consistency(&text, metadata)
        .map_err(|reason| PipelineError::RewriteInconsistent { record_id: existing.record_id.clone(), reason })?;
    let mut out = existing.clone();
    out.record_id = format!("{}/rewrite", existing.record_id);
    out.target = text;
    out.metadata = metadata.clone();
    out.stage_audit.push(AuditEntry::pass(STAGE, ""));
    out.validate()?;
    Ok(out)
}

/// Rewrite every caption record using its own metadata. Inconsistent
/// rewrites keep the original with a failing audit entry; other kinds pass
/// through.
pub fn rewrite_captions(records: &[DatasetRecord], ctx: &StageContext) -> Result<StageOutput> {
    let client = ctx.client()?;
    let parts = run_batched(ctx, "rewrite", records, |r| r.record_id.clone(), |r| {
        if r.kind != RecordKind::Caption {
            return Ok(StageOutput { records: vec![r.clone()], ..Default::default() });
        }
        match rewrite_caption(r, &r.metadata, client) {
            Ok(new) => Ok(StageOutput { records: vec![new], ..Default::default() }),
            Err(e @ PipelineError::RewriteInconsistent { .. }) => {
                let mut kept = r.clone();
                kept.stage_audit.push(AuditEntry::fail("rewrite", e.to_string()));
                Ok(StageOutput { records: vec![kept], flagged: vec![r.record_id.clone()], ..Default::default() })
            }
            Err(e) => Err(e),
        }
    })?;
    Ok(StageOutput::merge(parts))
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some((_, text)) = split_option(line) {
        return text;
    }
    let line = line.trim_start_matches(['-', '*', '•']).trim_start();
    match line.split_once(". ") {
        Some((n, rest)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => rest.trim(),
        _ => line,
    }
}

/// Add distractors until the question has at least [`MIN_OPTIONS`] options,
/// then shuffle with a per-record seeded RNG.
pub fn augment_options(qa: &DatasetRecord, client: &ProviderClient, seed: u64) -> Result<DatasetRecord> {
    const STAGE: &str = "augment";
    let (Some(options), Some(answer)) = (&qa.options, qa.correct_option()) else {
        return Err(PipelineError::InvalidInput(format!("{} has no options", qa.record_id)));
    };
    if qa.kind != RecordKind::Qa || options.len() < 2 {
        return Err(PipelineError::InvalidInput(format!("{} is not a QA with at least 2 options", qa.record_id)));
    }
    let answer = answer.to_owned();
    let question = question_of(&qa.prompt);
    let wanted = MIN_OPTIONS.saturating_sub(options.len()).max(1) + 2;
    let req = ProviderRequest::new(Role::QaGenerator, OPTION_AUGMENTATION)
        .var("question", question.clone())
        .var("options", options.join("\n"))
        .var("answer", answer.clone())
        .var("count", wanted.to_string());
    let text = send(client, &qa.record_id, &req)?.text;

    let mut seen: std::collections::BTreeSet<String> = options.iter().map(|o| o.trim().to_lowercase()).collect();
    let mut all = options.clone();
    let mut dropped = 0;
    for line in text.lines() {
        let candidate = strip_list_marker(line);
        if candidate.is_empty() {
            continue;
        }
        if seen.insert(candidate.to_lowercase()) {
            all.push(candidate.to_owned());
        } else {
            dropped += 1;
        }
    }
    let mut rng = record_rng(seed, &qa.record_id);
    all.shuffle(&mut rng);
    let index = all.iter().position(|o| *o == answer).expect("answer kept");
    let mut out = qa.clone();
    out.record_id = format!("{}/aug", qa.record_id);
    out.prompt = qa_prompt(&question, &all);
    out.target = qa_target(&all, index);
    out.answer_index = Some(index);
    let note = format!("{} options, {dropped} duplicate distractors dropped", all.len());
    out.options = Some(all);
    out.stage_audit.push(if out.options.as_ref().map_or(0, Vec::len) >= MIN_OPTIONS {
        AuditEntry::pass(STAGE, note)
    } else {
        AuditEntry::fail(STAGE, format!("short of {MIN_OPTIONS}: {note}"))
    });
    out.validate()?;
    Ok(out)
}

/// Augment every QA record; other kinds pass through.
pub fn augment_all(records: &[DatasetRecord], ctx: &StageContext) -> Result<StageOutput> {
    let client = ctx.client()?;
    let parts = run_batched(ctx, "augment", records, |r| r.record_id.clone(), |r| {
        let record = if r.kind == RecordKind::Qa { augment_options(r, client, ctx.seed)? } else { r.clone() };
        Ok(StageOutput { records: vec![record], ..Default::default() })
    })?;
    Ok(StageOutput::merge(parts))
}

/// Text a verifier judges for a record.
fn review_text(r: &DatasetRecord) -> String {
    if r.kind.is_qa() {
        format!("{}\nAnswer: {}", r.prompt, r.target)
    } else {
        r.target.clone()
    }
}

fn verdict_stage(
    records: &[DatasetRecord],
    ctx: &StageContext,
    stage: &str,
    request: impl Fn(&DatasetRecord) -> ProviderRequest + Sync,
    no_reason: &str,
) -> Result<StageOutput> {
    let client = ctx.client()?;
    let parts = run_batched(ctx, stage, records, |r| r.record_id.clone(), |r| {
        let mut record = r.clone();
        match client.send(&request(r)) {
            Ok(resp) if resp.verdict == Some(Verdict::Yes) => {
                record.stage_audit.push(AuditEntry::pass(stage, ""));
                Ok(StageOutput { records: vec![record], ..Default::default() })
            }
            Ok(_) => Ok(StageOutput::drop(stage, &r.record_id, no_reason)),
            Err(e @ crate::provider::ProviderError::MalformedVerdict(_)) => {
                record.stage_audit.push(AuditEntry::fail(stage, format!("{}: kept for manual review", e.class_name())));
                Ok(StageOutput { records: vec![record], flagged: vec![r.record_id.clone()], ..Default::default() })
            }
            Err(source) => Err(PipelineError::Provider { item: r.record_id.clone(), source }),
        }
    })?;
    let out = StageOutput::merge(parts);
    if !records.is_empty() {
        log::info!(
            "{stage}: kept {} of {} ({:.1}% dropped, {} flagged)",
            out.records.len(),
            records.len(),
            100.0 * out.dropped.len() as f64 / records.len() as f64,
            out.flagged.len()
        );
    }
    Ok(out)
}

/// Stage 4: keep records the verifier approves.
pub fn quality_filter(records: &[DatasetRecord], ctx: &StageContext) -> Result<StageOutput> {
    verdict_stage(
        records,
        ctx,
        "filter",
        |r| ProviderRequest::new(Role::Verifier, QUALITY_CHECK).var("text", review_text(r)),
        "rejected by verifier",
    )
}

/// Keep the records the verifier judges hard.
pub fn select_hard_examples(records: &[DatasetRecord], ctx: &StageContext) -> Result<StageOutput> {
    verdict_stage(
        records,
        ctx,
        "select",
        |r| {
            ProviderRequest::new(Role::Verifier, DIFFICULTY)
                .var("option_count", r.options.as_ref().map_or(0, Vec::len).to_string())
                .var("text", review_text(r))
        },
        "not hard",
    )
}
