//! Rule-based rewards: tag format, answer accuracy and structured-thinking
//! overlap with ground-truth metadata.
//!
//! For QA tasks the total is `format + accuracy`; for caption tasks it is
//! `format + structured`. Both second terms are only computed when the
//! format check passes, so tag-less outputs never earn content credit.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::metadata::{format_bpm_text, Category, DatasetRecord, MusicMetadata, RecordKind};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Words ignored when matching metadata values against a caption.
pub const STOP_WORDS: [&str; 30] = [
    "a", "an", "the", "and", "or", "but", "nor", "of", "in", "on", "at", "to", "for", "with",
    "by", "from", "as", "is", "are", "was", "were", "be", "it", "its", "this", "that", "these",
    "those", "into", "over",
];

const TERMINAL_PUNCTUATION: [char; 6] = ['.', ',', '!', '?', ';', ':'];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("output does not follow the <think>/<answer> structure")]
    Extraction,
    #[error("metadata has no populated categories")]
    EmptyMetadata,
    #[error("prediction for unknown record {0:?}")]
    UnknownRecord(String),
}

impl RewardError {
    pub fn class_name(&self) -> &'static str {
        match self {
            RewardError::Extraction => "ExtractionError",
            RewardError::EmptyMetadata => "EmptyMetadata",
            RewardError::UnknownRecord(_) => "UnknownRecord",
        }
    }
}

/// Bodies of a well-formed `<think>…</think><answer>…</answer>` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tagged<'a> {
    pub think: &'a str,
    pub answer: &'a str,
}

fn valid_body(body: &str) -> bool {
    !body.trim().is_empty() && !TAGS.iter().any(|t| body.contains(t))
}

/// Strict structural parse. Outer whitespace is ignored; the only other text
/// allowed outside the two tag pairs is whitespace between them.
pub fn parse_tagged(output: &str) -> Option<Tagged<'_>> {
    let s = output.trim();
    let rest = s.strip_prefix(THINK_OPEN)?;
    let close = rest.find(THINK_CLOSE)?;
    let think = &rest[..close];
    let rest = rest[close + THINK_CLOSE.len()..].trim_start();
    let rest = rest.strip_prefix(ANSWER_OPEN)?;
    let close = rest.find(ANSWER_CLOSE)?;
    let answer = &rest[..close];
    let trailing = &rest[close + ANSWER_CLOSE.len()..];
    (trailing.is_empty() && valid_body(think) && valid_body(answer))
        .then_some(Tagged { think, answer })
}

pub fn format_reward(output: &str) -> u8 {
    parse_tagged(output).is_some() as u8
}

/// The answer-tag body, verbatim.
pub fn extract_answer(output: &str) -> Result<&str, RewardError> {
    parse_tagged(output).map(|t| t.answer).ok_or(RewardError::Extraction)
}

/// NFC, lowercase, trimmed, internal whitespace collapsed, terminal
/// punctuation stripped.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c| TERMINAL_PUNCTUATION.contains(&c))
        .trim_end()
        .to_owned()
}

/// Letter of an MCQ gold answer written as "(X) ...", lowercased.
fn mcq_letter(normalized_gold: &str) -> Option<char> {
    let mut chars = normalized_gold.chars();
    match (chars.next(), chars.next(), chars.next()) {
        (Some('('), Some(letter), Some(')')) if letter.is_alphabetic() => Some(letter),
        _ => None,
    }
}

/// 1 iff the normalized answers are equal, or the gold is "(X) ..." and the
/// prediction is the bare letter X.
pub fn accuracy_reward(predicted: &str, gold: &str) -> u8 {
    let p = normalize_answer(predicted);
    let g = normalize_answer(gold);
    if p == g {
        return 1;
    }
    let mut pc = p.chars();
    match (mcq_letter(&g), pc.next(), pc.next()) {
        (Some(letter), Some(c), None) => (c == letter) as u8,
        _ => 0,
    }
}

/// Lowercased word tokens: runs of alphanumerics, `#` and `/` (so "4/4" and
/// "f#aug" stay whole).
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    lowered
        .split(|c: char| !(c.is_alphanumeric() || c == '#' || c == '/'))
        .map(|t| t.trim_matches('/'))
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Distinct non-stop-word tokens, in first-seen order. Falls back to all
/// tokens when every token is a stop word.
pub fn content_words(text: &str) -> Vec<String> {
    let tokens = tokenize(text);
    let mut seen = HashSet::new();
    let content: Vec<String> = tokens
        .iter()
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
        .filter(|t| seen.insert((*t).clone()))
        .cloned()
        .collect();
    if !content.is_empty() {
        return content;
    }
    let mut seen = HashSet::new();
    tokens.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// Per-category match fraction of one populated category.
pub fn category_match(caption_tokens: &HashSet<String>, metadata: &MusicMetadata, cat: Category) -> f64 {
    if cat == Category::Bpm {
        return match metadata.bpm {
            Some(bpm) => caption_tokens.contains(&format_bpm_text(bpm.round())) as u8 as f64,
            None => 0.0,
        };
    }
    let Some(text) = metadata.category_text(cat) else {
        return 0.0;
    };
    let words = content_words(&text);
    if words.is_empty() {
        return 0.0;
    }
    let hits = words.iter().filter(|w| caption_tokens.contains(*w)).count();
    (hits as f64 / words.len() as f64).clamp(0.0, 1.0)
}

/// Mean per-category word overlap between a caption and the populated
/// metadata categories.
pub fn structured_thinking_reward(caption: &str, metadata: &MusicMetadata) -> Result<f64, RewardError> {
    let cats = metadata.populated_categories();
    if cats.is_empty() {
        return Err(RewardError::EmptyMetadata);
    }
    let tokens: HashSet<String> = tokenize(caption).into_iter().collect();
    let sum: f64 = cats.iter().map(|&c| category_match(&tokens, metadata, c)).sum();
    Ok(sum / cats.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardTask {
    Qa { gold: String },
    Caption { metadata: MusicMetadata },
}

impl RewardTask {
    pub fn for_record(record: &DatasetRecord) -> Self {
        match record.kind {
            RecordKind::Qa | RecordKind::CotQa => RewardTask::Qa {
                gold: record.target.clone(),
            },
            RecordKind::Caption | RecordKind::CotCaption => RewardTask::Caption {
                metadata: record.metadata.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub accuracy: Option<u8>,
    pub structured: Option<f64>,
    pub total: f64,
}

pub fn total_reward(output: &str, task: &RewardTask) -> RewardBreakdown {
    let tagged = parse_tagged(output);
    let format = tagged.is_some() as u8;
    match task {
        RewardTask::Qa { gold } => {
            let accuracy = tagged.map_or(0, |t| accuracy_reward(t.answer, gold));
            RewardBreakdown {
                format,
                accuracy: Some(accuracy),
                structured: None,
                total: format as f64 + accuracy as f64,
            }
        }
        RewardTask::Caption { metadata } => {
            let structured = tagged
                .and_then(|t| structured_thinking_reward(t.answer, metadata).ok())
                .unwrap_or(0.0);
            RewardBreakdown {
                format,
                accuracy: None,
                structured: Some(structured),
                total: format as f64 + structured,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub record_id: String,
    #[serde(flatten)]
    pub reward: RewardBreakdown,
}

/// Join predictions with their records by id and score each one.
pub fn score_predictions(
    predictions: &[Prediction],
    records: &[DatasetRecord],
) -> Result<Vec<ScoredPrediction>, RewardError> {
    let by_id: std::collections::HashMap<&str, &DatasetRecord> =
        records.iter().map(|r| (r.record_id.as_str(), r)).collect();
    predictions
        .iter()
        .map(|p| {
            let record = by_id
                .get(p.record_id.as_str())
                .ok_or_else(|| RewardError::UnknownRecord(p.record_id.clone()))?;
            Ok(ScoredPrediction {
                record_id: p.record_id.clone(),
                reward: total_reward(&p.output, &RewardTask::for_record(record)),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_examples() {
        assert_eq!(format_reward("<think>steps</think><answer>C major</answer>"), 1);
        assert_eq!(format_reward("<answer>x</answer><think>y</think>"), 0);
        assert_eq!(format_reward("<think></think><answer>x</answer>"), 0);
        assert_eq!(format_reward("  <think>a</think>\n <answer>b</answer>\n"), 1);
        assert_eq!(format_reward("<think>a</think>junk<answer>b</answer>"), 0);
        assert_eq!(format_reward("<think>a</think><answer>b</answer>x"), 0);
        assert_eq!(format_reward("<think>a<think></think><answer>b</answer>"), 0);
        assert_eq!(format_reward("<think>a</think><answer>b</answer><answer>c</answer>"), 0);
        assert_eq!(format_reward("<think> </think><answer>b</answer>"), 0);
    }

    #[test]
    fn extraction() {
        assert_eq!(extract_answer("<think>t</think><answer> B </answer>"), Ok(" B "));
        assert_eq!(extract_answer("<answer>B</answer>"), Err(RewardError::Extraction));
        assert_eq!(
            extract_answer("<think>t</think><answer><b>x</b></answer>"),
            Ok("<b>x</b>")
        );
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy_reward("C Major", "c major"), 1);
        assert_eq!(accuracy_reward("Jazz", "Classical"), 0);
        assert_eq!(accuracy_reward("  c   major. ", "C major"), 1);
        assert_eq!(accuracy_reward("Cafe\u{301}", "Caf\u{e9}"), 1);
    }

    #[test]
    fn mcq_letter_only_gold_letter_scores() {
        // exhaustive over option letters A-J
        for letter in 'A'..='J' {
            let expected = (letter == 'B') as u8;
            assert_eq!(accuracy_reward(&letter.to_string(), "(B) Classical"), expected, "{letter}");
            assert_eq!(
                accuracy_reward(&letter.to_ascii_lowercase().to_string(), "(B) Classical"),
                expected
            );
        }
        // one-directional: a letter gold does not accept the full option
        assert_eq!(accuracy_reward("(B) Classical", "B"), 0);
        assert_eq!(accuracy_reward("(B) Classical", "(b) classical"), 1);
    }

    #[test]
    fn structured_full_match() {
        let meta = MusicMetadata { key: Some("G minor".into()), ..Default::default() };
        assert_eq!(structured_thinking_reward("A brooding piece in G minor.", &meta), Ok(1.0));
    }

    #[test]
    fn structured_half_match() {
        let meta = MusicMetadata {
            genre: Some("polka".into()),
            bpm: Some(100.0),
            key: Some("D major".into()),
            meter: Some("3/4".into()),
            structure: vec!["intro".into(), "coda".into()],
            instruments: vec!["accordion".into()],
            vocal_character: vec!["falsetto".into()],
            lyric_themes: vec!["harvest".into()],
            theory: Some("plagal cadence".into()),
            mix_notes: Some("dry mono".into()),
            ..Default::default()
        };
        assert_eq!(meta.populated_categories().len(), 10);
        let caption = "polka at 100 bpm in d major, 3/4 time with an intro and coda";
        assert_eq!(structured_thinking_reward(caption, &meta), Ok(0.5));
    }

    #[test]
    fn structured_empty_metadata() {
        assert_eq!(
            structured_thinking_reward("x", &MusicMetadata::default()),
            Err(RewardError::EmptyMetadata)
        );
    }

    #[test]
    fn total_examples() {
        let qa = RewardTask::Qa { gold: "(B) Classical".into() };
        assert_eq!(total_reward("B", &qa).total, 0.0);
        assert_eq!(total_reward("B", &qa).accuracy, Some(0));
        assert_eq!(total_reward("<think>t</think><answer>B</answer>", &qa).total, 2.0);
        let meta = MusicMetadata {
            genre: Some("jazz".into()),
            key: Some("C major".into()),
            meter: Some("4/4".into()),
            instruments: vec!["piano".into()],
            theory: Some("ii V I".into()),
            ..Default::default()
        };
        // 3 of 5 categories fully matched
        let out = "<think>t</think><answer>jazz in c major with piano</answer>";
        let r = total_reward(out, &RewardTask::Caption { metadata: meta });
        assert!((r.structured.unwrap() - 0.6).abs() < 1e-12);
        assert!((r.total - 1.6).abs() < 1e-12);
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just("<think>".to_string()),
                Just("</think>".to_string()),
                Just("<answer>".to_string()),
                Just("</answer>".to_string()),
                "[a-z ]{0,6}",
                Just("\n".to_string()),
            ],
            0..8,
        )
        .prop_map(|v| v.concat())
    }

    proptest! {
        #[test]
        fn format_ignores_outer_whitespace(s in text_strategy(), pre in "[ \n\t]{0,3}", post in "[ \n\t]{0,3}") {
            prop_assert_eq!(format_reward(&s), format_reward(&format!("{pre}{s}{post}")));
        }

        #[test]
        fn rewards_in_range(out in text_strategy(), gold in "[a-zA-Z() ]{0,10}", caption in "[a-z0-9 ]{0,40}") {
            let f = format_reward(&out);
            prop_assert!(f <= 1);
            prop_assert!(accuracy_reward(&out, &gold) <= 1);
            let meta = MusicMetadata { genre: Some("folk rock".into()), bpm: Some(90.0), ..Default::default() };
            let s = structured_thinking_reward(&caption, &meta).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let t = total_reward(&out, &RewardTask::Qa { gold: gold.clone() }).total;
            prop_assert!((0.0..=2.0).contains(&t));
        }

        #[test]
        fn accuracy_symmetric_without_mcq(a in "[a-z .!]{0,8}", b in "[a-z .!]{0,8}") {
            prop_assert_eq!(accuracy_reward(&a, &b), accuracy_reward(&b, &a));
        }

        #[test]
        fn structured_monotone(base in "[a-z ]{0,30}", extra in "[a-z ]{0,30}") {
            let meta = MusicMetadata {
                genre: Some("delta blues".into()),
                instruments: vec!["slide guitar".into(), "harmonica".into()],
                key: Some("E minor".into()),
                ..Default::default()
            };
            let before = structured_thinking_reward(&base, &meta).unwrap();
            let matched = format!("{base} slide harmonica");
            prop_assert!(structured_thinking_reward(&matched, &meta).unwrap() >= before);
            let unmatched: String = extra
                .split_whitespace()
                .filter(|w| !["delta", "blues", "slide", "guitar", "harmonica", "e", "minor"].contains(w))
                .map(|w| format!(" {w}"))
                .collect();
            prop_assert_eq!(structured_thinking_reward(&format!("{base}{unmatched}"), &meta).unwrap(), before);
        }
    }
}
