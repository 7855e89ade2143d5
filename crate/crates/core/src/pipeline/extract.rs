use serde::{Deserialize, Serialize};

use super::checkpoint::run_batched;
use super::corpus::SegmentRef;
use super::stages::StageContext;
use super::{PipelineError, Result};
use crate::audio::{
    chromagram, estimate_key, estimate_meter, estimate_tempo, onset_envelope, recognize_chords, AudioClip,
    ChordConfig, ChordLabel,
};
use crate::metadata::{canonical_key, AudioRef, AuditEntry, MusicMetadata, SourceSegment};
use crate::provider::templates::TRANSCRIBE;
use crate::provider::{ProviderRequest, Role};

pub const STAGE: &str = "extract";

/// Extractor output for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetadata {
    pub segment_id: String,
    pub audio_ref: AudioRef,
    pub metadata: MusicMetadata,
    pub audit: Vec<AuditEntry>,
}

/// Tempo, meter, key and chords of one clip. Failures become audit entries.
pub fn extract_clip(clip: &AudioClip) -> (MusicMetadata, Vec<AuditEntry>) {
    let mut meta = MusicMetadata::default();
    let mut audit = Vec::new();
    let fail = |what: &str, class: &str| AuditEntry::fail(STAGE, format!("{what}: {class}"));

    match onset_envelope(clip).and_then(|env| estimate_tempo(&env).map(|t| (env, t))) {
        Ok((env, tempo)) => {
            let bpm = (tempo.bpm * 10.0).round() / 10.0;
            if (40.0..=240.0).contains(&bpm) {
                meta.bpm = Some(bpm);
            } else {
                audit.push(AuditEntry::fail(STAGE, format!("tempo: {bpm} outside [40, 240]")));
            }
            let meter = estimate_meter(&env, &tempo);
            if meter.low_confidence {
                audit.push(AuditEntry::fail(STAGE, "meter: low confidence"));
            } else {
                meta.meter = Some(meter.meter.to_string());
            }
        }
        Err(e) => audit.push(fail("tempo", e.class_name())),
    }

    match chromagram(clip).and_then(|c| estimate_key(&c).map(|k| (c, k))) {
        Ok((chroma, key)) => {
            meta.key = Some(canonical_key(key.tonic, key.mode));
            match recognize_chords(&chroma, &ChordConfig::default()) {
                Ok(chords) if chords.iter().any(|c| c.label != ChordLabel::NoChord) => meta.chords = chords,
                Ok(_) => audit.push(AuditEntry::fail(STAGE, "chords: no chords")),
                Err(e) => audit.push(fail("chords", e.class_name())),
            }
        }
        Err(e) => audit.push(fail("key", e.class_name())),
    }
    (meta, audit)
}

/// Run the extractors over every segment; lyrics come from the transcriber
/// when `ctx.transcribe` is set and a provider is configured.
pub fn extract_metadata(segments: &[(SegmentRef, AudioClip)], ctx: &StageContext) -> Result<Vec<SegmentMetadata>> {
    let refs: Vec<&SegmentRef> = segments.iter().map(|(s, _)| s).collect();
    let index: std::collections::BTreeMap<&str, &AudioClip> =
        segments.iter().map(|(s, c)| (s.segment_id.as_str(), c)).collect();
    let client = if ctx.transcribe { ctx.client } else { None };
    let mut rows = run_batched(ctx, STAGE, &refs, |s| s.segment_id.clone(), |seg| {
        let (mut metadata, mut audit) = extract_clip(index[seg.segment_id.as_str()]);
        metadata.source_segment = Some(SourceSegment { clip_id: seg.clip_id.clone(), offset_sec: seg.offset_sec });
        if let Some(client) = client {
            let req = ProviderRequest::new(Role::Transcriber, TRANSCRIBE).audio(seg.provider_audio());
            let text = client
                .send(&req)
                .map_err(|source| PipelineError::Provider { item: seg.segment_id.clone(), source })?
                .text;
            let text = text.trim();
            if !text.is_empty() {
                metadata.lyrics = Some(text.to_owned());
            }
        }
        if audit.iter().all(|a| a.passed) {
            audit.push(AuditEntry::pass(STAGE, ""));
        }
        Ok(SegmentMetadata { segment_id: seg.segment_id.clone(), audio_ref: seg.audio_ref(), metadata, audit })
    })?;
    rows.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    Ok(rows)
}
