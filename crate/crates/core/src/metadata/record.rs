use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::parse::parse_key;
use super::RecordError;
use crate::audio::ChordSegment;

/// The closed set of metadata categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Genre,
    Bpm,
    Key,
    Meter,
    Structure,
    Instruments,
    VocalCharacter,
    LyricThemes,
    Theory,
    MixNotes,
    Dynamics,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::Genre,
        Category::Bpm,
        Category::Key,
        Category::Meter,
        Category::Structure,
        Category::Instruments,
        Category::VocalCharacter,
        Category::LyricThemes,
        Category::Theory,
        Category::MixNotes,
        Category::Dynamics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Genre => "Genre",
            Category::Bpm => "BPM",
            Category::Key => "Key",
            Category::Meter => "Meter",
            Category::Structure => "Structure",
            Category::Instruments => "Instruments",
            Category::VocalCharacter => "Vocal Character",
            Category::LyricThemes => "Lyric Themes",
            Category::Theory => "Theory",
            Category::MixNotes => "Mix Notes",
            Category::Dynamics => "Dynamics",
        }
    }

    /// Case-, space- and underscore-insensitive lookup.
    pub fn from_name(name: &str) -> Option<Category> {
        let wanted = squash(name);
        Category::ALL.into_iter().find(|c| squash(c.name()) == wanted)
    }

    /// Categories whose values are comma-separated lists.
    pub fn is_list(self) -> bool {
        matches!(
            self,
            Category::Structure
                | Category::Instruments
                | Category::VocalCharacter
                | Category::LyricThemes
        )
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSegment {
    pub clip_id: String,
    pub offset_sec: f64,
}

/// Per-segment structured metadata.
///
/// Field order here is the serialized key order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MusicMetadata {
    pub genre: Option<String>,
    pub bpm: Option<f64>,
    pub key: Option<String>,
    pub meter: Option<String>,
    pub structure: Vec<String>,
    pub instruments: Vec<String>,
    pub vocal_character: Vec<String>,
    pub lyric_themes: Vec<String>,
    pub theory: Option<String>,
    pub mix_notes: Option<String>,
    pub dynamics: Option<String>,
    pub lyrics: Option<String>,
    pub chords: Vec<ChordSegment>,
    pub source_segment: Option<SourceSegment>,
    /// Categories outside the closed set (e.g. "Subgenre"), verbatim.
    pub extras: BTreeMap<String, String>,
}

fn non_blank(s: &Option<String>) -> Option<&str> {
    s.as_deref().filter(|v| !v.trim().is_empty())
}

/// BPM as text: integral values without a decimal point.
pub fn format_bpm_text(bpm: f64) -> String {
    if bpm.fract() == 0.0 {
        format!("{bpm:.0}")
    } else {
        format!("{bpm}")
    }
}

impl MusicMetadata {
    /// Text of a populated category, list values joined with ", ".
    pub fn category_text(&self, cat: Category) -> Option<String> {
        let list = |v: &Vec<String>| {
            let items: Vec<&str> = v.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            (!items.is_empty()).then(|| items.join(", "))
        };
        match cat {
            Category::Genre => non_blank(&self.genre).map(str::to_owned),
            Category::Bpm => self.bpm.map(format_bpm_text),
            Category::Key => non_blank(&self.key).map(str::to_owned),
            Category::Meter => non_blank(&self.meter).map(str::to_owned),
            Category::Structure => list(&self.structure),
            Category::Instruments => list(&self.instruments),
            Category::VocalCharacter => list(&self.vocal_character),
            Category::LyricThemes => list(&self.lyric_themes),
            Category::Theory => non_blank(&self.theory).map(str::to_owned),
            Category::MixNotes => non_blank(&self.mix_notes).map(str::to_owned),
            Category::Dynamics => non_blank(&self.dynamics).map(str::to_owned),
        }
    }

    pub fn populated_categories(&self) -> Vec<Category> {
        Category::ALL
            .into_iter()
            .filter(|&c| self.category_text(c).is_some())
            .collect()
    }

    pub fn has_categories(&self) -> bool {
        Category::ALL.iter().any(|&c| self.category_text(c).is_some())
    }

    /// Brace-delimited `{"Category": value, ...}` block of populated categories.
    pub fn to_block(&self) -> String {
        let parts: Vec<String> = self
            .populated_categories()
            .into_iter()
            .map(|c| format!("\"{}\": {}", c.name(), self.category_text(c).unwrap_or_default()))
            .collect();
        format!("{{{}}}", parts.join(", "))
    }

    pub fn validate(&self, record_id: &str) -> Result<(), RecordError> {
        let invalid = |field: &str, reason: String| RecordError::Validation {
            record_id: record_id.to_owned(),
            field: field.to_owned(),
            reason,
        };
        if let Some(bpm) = self.bpm {
            if !(40.0..=240.0).contains(&bpm) {
                return Err(invalid("metadata.bpm", format!("{bpm} outside [40, 240]")));
            }
        }
        if let Some(key) = non_blank(&self.key) {
            if parse_key(key).is_none() {
                return Err(invalid("metadata.key", format!("{key:?} is not a key")));
            }
        }
        for (i, c) in self.chords.iter().enumerate() {
            if !(c.start.is_finite() && c.end.is_finite() && c.start < c.end) {
                return Err(invalid("metadata.chords", format!("segment {i} has start >= end")));
            }
        }
        if self.chords.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(invalid("metadata.chords", "segments overlap".into()));
        }
        if let Some(src) = &self.source_segment {
            if !src.offset_sec.is_finite() || src.offset_sec < 0.0 {
                return Err(invalid("metadata.source_segment", "bad offset".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Caption,
    Qa,
    CotCaption,
    CotQa,
}

impl RecordKind {
    pub fn is_qa(self) -> bool {
        matches!(self, RecordKind::Qa | RecordKind::CotQa)
    }

    pub fn is_cot(self) -> bool {
        matches!(self, RecordKind::CotCaption | RecordKind::CotQa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioRef {
    pub path: String,
    pub offset_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: String,
    pub passed: bool,
    pub note: String,
}

impl AuditEntry {
    pub fn pass(stage: &str, note: impl Into<String>) -> Self {
        Self {
            stage: stage.to_owned(),
            passed: true,
            note: note.into(),
        }
    }

    pub fn fail(stage: &str, note: impl Into<String>) -> Self {
        Self {
            stage: stage.to_owned(),
            passed: false,
            note: note.into(),
        }
    }
}

/// One training example.
///
/// `record_id` encodes lineage: it starts with the corpus segment id and
/// each derived record appends a `/`-separated suffix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub record_id: String,
    pub kind: RecordKind,
    pub audio_ref: AudioRef,
    pub skill: Option<String>,
    pub prompt: String,
    pub target: String,
    pub options: Option<Vec<String>>,
    pub answer_index: Option<usize>,
    pub think: Option<String>,
    pub metadata: MusicMetadata,
    pub stage_audit: Vec<AuditEntry>,
}

impl DatasetRecord {
    /// Segment id at the root of this record's lineage.
    pub fn segment_id(&self) -> &str {
        self.record_id.split('/').next().unwrap_or(&self.record_id)
    }

    pub fn correct_option(&self) -> Option<&str> {
        let opts = self.options.as_ref()?;
        opts.get(self.answer_index?).map(String::as_str)
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        let invalid = |field: &str, reason: &str| RecordError::Validation {
            record_id: self.record_id.clone(),
            field: field.to_owned(),
            reason: reason.to_owned(),
        };
        if self.record_id.trim().is_empty() {
            return Err(invalid("record_id", "empty"));
        }
        if self.target.trim().is_empty() {
            return Err(invalid("target", "empty"));
        }
        if !self.audio_ref.offset_sec.is_finite() || self.audio_ref.offset_sec < 0.0 {
            return Err(invalid("audio_ref.offset_sec", "must be finite and non-negative"));
        }
        let n_options = self.options.as_ref().map_or(0, Vec::len);
        if self.kind.is_qa() {
            if n_options == 0 {
                return Err(invalid("options", "QA record needs options"));
            }
            if self.answer_index.is_none() {
                return Err(invalid("answer_index", "QA record needs an answer index"));
            }
        }
        if let Some(i) = self.answer_index {
            if i >= n_options {
                return Err(invalid("answer_index", "out of range"));
            }
        }
        if self.kind.is_cot() && self.think.as_deref().is_none_or(|t| t.trim().is_empty()) {
            return Err(invalid("think", "CoT record needs a non-empty trace"));
        }
        self.metadata.validate(&self.record_id)
    }
}

/// Serialize records as JSONL (one object per line, fixed key order).
pub fn serialize_records(records: &[DatasetRecord]) -> Result<Vec<u8>, RecordError> {
    let mut out = Vec::new();
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut out, r).map_err(|e| RecordError::Validation {
            record_id: r.record_id.clone(),
            field: "<record>".into(),
            reason: e.to_string(),
        })?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Parse JSONL produced by [`serialize_records`]. Blank lines are skipped.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<DatasetRecord>, RecordError> {
    let text = std::str::from_utf8(bytes).map_err(|e| RecordError::Parse(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let r: DatasetRecord = serde_json::from_str(line)
                .map_err(|e| RecordError::Parse(format!("line {}: {e}", i + 1)))?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}
