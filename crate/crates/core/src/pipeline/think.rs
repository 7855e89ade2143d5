use serde::{Deserialize, Serialize};

use super::checkpoint::run_batched;
use super::stages::StageContext;
use super::{PipelineError, Result};
use crate::metadata::{AuditEntry, DatasetRecord, RecordKind};
use crate::provider::templates::{COT_CAPTION, COT_QA, STEP_REWRITE, STEP_VERIFY};
use crate::provider::{ProviderClient, ProviderError, ProviderRequest, Role, Verdict};

const STAGE: &str = "think";

pub const SFT_INSTRUCTION: &str =
    "Output the thinking process in <think> </think> and final answer in <answer> </answer>";

/// Chains with a larger fraction of failing steps are discarded.
pub const FAIL_THRESHOLD: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Kept,
    Rewritten,
    Discarded,
}

impl Disposition {
    pub fn from_fraction(fail_fraction: f64) -> Self {
        if fail_fraction > FAIL_THRESHOLD {
            Disposition::Discarded
        } else if fail_fraction > 0.0 {
            Disposition::Rewritten
        } else {
            Disposition::Kept
        }
    }

    /// Same rule in exact integer arithmetic.
    pub fn from_counts(failing: usize, total: usize) -> Self {
        if failing == 0 {
            Disposition::Kept
        } else if failing * 100 > 30 * total {
            Disposition::Discarded
        } else {
            Disposition::Rewritten
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Kept => "kept",
            Disposition::Rewritten => "rewritten",
            Disposition::Discarded => "discarded",
        }
    }
}

/// A generated chain with its step verdicts. `steps` and `step_verdicts`
/// are the chain as generated; `base.think` holds the final trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub base: DatasetRecord,
    pub steps: Vec<String>,
    pub step_verdicts: Vec<StepVerdict>,
    pub disposition: Disposition,
}

impl CotRecord {
    pub fn fail_fraction(&self) -> f64 {
        let failing = self.step_verdicts.iter().filter(|v| **v == StepVerdict::Fail).count();
        failing as f64 / self.step_verdicts.len().max(1) as f64
    }
}

/// Split on newlines and on `.`, `!` or `?` followed by whitespace.
pub fn split_steps(text: &str) -> Vec<String> {
    let mut steps = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\n' {
            steps.push(std::mem::take(&mut current));
            continue;
        }
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            steps.push(std::mem::take(&mut current));
        }
    }
    steps.push(current);
    steps.into_iter().map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
}

fn verify(client: &ProviderClient, record: &DatasetRecord, step: &str) -> Result<StepVerdict> {
    let context = format!("{}\n{}", record.prompt, record.target);
    let req = ProviderRequest::new(Role::Verifier, STEP_VERIFY).var("context", context).var("step", step);
    match client.send(&req) {
        Ok(r) if r.verdict == Some(Verdict::Yes) => Ok(StepVerdict::Pass),
        Ok(_) | Err(ProviderError::MalformedVerdict(_)) => Ok(StepVerdict::Fail),
        Err(source) => Err(PipelineError::Provider { item: record.record_id.clone(), source }),
    }
}

/// Generate, verify and dispose of one chain.
pub fn think_one(record: &DatasetRecord, client: &ProviderClient) -> Result<CotRecord> {
    let provider_err = |source| PipelineError::Provider { item: record.record_id.clone(), source };
    let metadata = record.metadata.to_block();
    let req = if record.kind.is_qa() {
        ProviderRequest::new(Role::CotGenerator, COT_QA)
            .var("prompt", record.prompt.clone())
            .var("target", record.target.clone())
            .var("metadata", metadata.clone())
    } else {
        ProviderRequest::new(Role::CotGenerator, COT_CAPTION).var("metadata", metadata.clone()).var("target", record.target.clone())
    };
    let chain = client.send(&req).map_err(provider_err)?.text;
    let steps = split_steps(&chain);
    if steps.is_empty() {
        return Err(PipelineError::InvalidInput(format!("empty chain for {}", record.record_id)));
    }
    let step_verdicts = steps.iter().map(|s| verify(client, record, s)).collect::<Result<Vec<_>>>()?;
    let failing = step_verdicts.iter().filter(|v| **v == StepVerdict::Fail).count();
    let disposition = Disposition::from_counts(failing, steps.len());

    let mut final_steps = steps.clone();
    let mut note = format!("{failing}/{} steps failed", steps.len());
    if disposition == Disposition::Rewritten {
        let mut removed = 0;
        let mut rewritten = Vec::new();
        for (step, verdict) in steps.iter().zip(&step_verdicts) {
            if *verdict == StepVerdict::Pass {
                rewritten.push(step.clone());
                continue;
            }
            let req = ProviderRequest::new(Role::CotGenerator, STEP_REWRITE).var("metadata", metadata.clone()).var("step", step.clone());
            let new = client.send(&req).map_err(provider_err)?.text.trim().to_owned();
            if !new.is_empty() && verify(client, record, &new)? == StepVerdict::Pass {
                rewritten.push(new);
            } else {
                removed += 1;
            }
        }
        if removed > 0 {
            note.push_str(&format!(", {removed} removed after failed rewrite"));
        }
        final_steps = rewritten;
    }

    let mut base = record.clone();
    base.record_id = format!("{}/think", record.record_id);
    base.kind = if record.kind.is_qa() { RecordKind::CotQa } else { RecordKind::CotCaption };
    base.prompt = format!("{}\n{SFT_INSTRUCTION}", record.prompt);
    base.think = Some(final_steps.join(" "));
    base.stage_audit.push(if disposition == Disposition::Discarded {
        AuditEntry::fail(STAGE, format!("discarded: {note}"))
    } else {
        AuditEntry::pass(STAGE, format!("{}: {note}", disposition.as_str()))
    });
    Ok(CotRecord { base, steps, step_verdicts, disposition })
}

/// Build chains for every record, in record-id order. Discarded chains are
/// returned too; callers keep the others for training.
pub fn build_think(records: &[DatasetRecord], ctx: &StageContext) -> Result<Vec<CotRecord>> {
    let client = ctx.client()?;
    let mut out = run_batched(ctx, STAGE, records, |r| r.record_id.clone(), |r| think_one(r, client))?;
    out.sort_by(|a, b| a.base.record_id.cmp(&b.base.record_id));
    let kept = out.iter().filter(|c| c.disposition != Disposition::Discarded).count();
    log::info!("think: {kept} of {} chains kept", out.len());
    Ok(out)
}
