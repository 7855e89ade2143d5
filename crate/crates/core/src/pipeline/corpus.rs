use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::audio::{decode_wav, segment, AudioClip};
use crate::metadata::AudioRef;

/// `{"clips": [{"clip_id": ..., "path": ...}]}`; paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub clips: Vec<CorpusClip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusClip {
    pub clip_id: String,
    pub path: String,
}

/// One fixed-length window of a corpus clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRef {
    /// `<clip_id>-sNNN`
    pub segment_id: String,
    pub clip_id: String,
    /// As written in the corpus manifest.
    pub path: String,
    pub offset_sec: f64,
    pub duration_sec: f64,
    #[serde(skip)]
    pub resolved: PathBuf,
}

impl SegmentRef {
    pub fn audio_ref(&self) -> AudioRef {
        AudioRef { path: self.path.clone(), offset_sec: self.offset_sec }
    }

    /// `path#t=offset` form used in provider requests.
    pub fn provider_audio(&self) -> String {
        format!("{}#t={}", self.resolved.display(), self.offset_sec)
    }
}

pub fn segment_id(clip_id: &str, index: usize) -> String {
    format!("{clip_id}-s{index:03}")
}

/// Decode every clip in the manifest and cut it into windows.
pub fn load_corpus(manifest: &Path, window_sec: f64, hop_sec: f64) -> Result<Vec<(SegmentRef, AudioClip)>> {
    let bytes = std::fs::read(manifest).map_err(PipelineError::io(manifest))?;
    let corpus: CorpusManifest = serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::InvalidInput(format!("corpus manifest {}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for clip in &corpus.clips {
        if clip.clip_id.is_empty() || clip.clip_id.contains('/') || !seen.insert(clip.clip_id.clone()) {
            return Err(PipelineError::InvalidInput(format!("bad or duplicate clip id {:?}", clip.clip_id)));
        }
        let resolved = base.join(&clip.path);
        let wav = std::fs::read(&resolved).map_err(PipelineError::io(&resolved))?;
        let audio = decode_wav(&wav).map_err(|source| PipelineError::Audio { path: clip.path.clone(), source })?;
        let windows = segment(&audio, window_sec, hop_sec)
            .map_err(|source| PipelineError::Audio { path: clip.path.clone(), source })?;
        for (i, w) in windows.into_iter().enumerate() {
            out.push((
                SegmentRef {
                    segment_id: segment_id(&clip.clip_id, i),
                    clip_id: clip.clip_id.clone(),
                    path: clip.path.clone(),
                    offset_sec: w.offset_sec(),
                    duration_sec: w.duration_sec(),
                    resolved: resolved.clone(),
                },
                w,
            ));
        }
    }
    out.sort_by(|a, b| a.0.segment_id.cmp(&b.0.segment_id));
    Ok(out)
}
