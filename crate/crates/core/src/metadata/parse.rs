//! Input parsing for structured metadata.
//!
//! Two input shapes are accepted: a JSON object, and the looser brace format
//! `{"Genre": Americana, "BPM": 125, "Structure": Intro, Verse, ...}` whose
//! values are unquoted and may themselves contain commas. In the brace form
//! a value runs until the next quoted `"Name":` key.

use serde_json::Value;

use super::record::{Category, MusicMetadata};
use super::RecordError;
use crate::audio::{Mode, PITCH_CLASS_NAMES};

/// Parse key text such as "G minor", "Eb major", "F#m" into (pitch class, mode).
pub fn parse_key(text: &str) -> Option<(u8, Mode)> {
    let t = text.trim();
    let mut chars = t.chars();
    let letter = chars.next()?.to_ascii_uppercase();
    let natural = match letter {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let rest = chars.as_str();
    let is_mode = |r: &str| matches!(r.trim().to_ascii_lowercase().as_str(), "" | "major" | "maj" | "minor" | "min" | "m");
    let (shift, rest) = if let Some(r) = rest.strip_prefix('#').or_else(|| rest.strip_prefix('♯')) {
        (1, r)
    } else if let Some(r) = rest.strip_prefix('♭') {
        (-1, r)
    } else if let Some(r) = rest.strip_prefix('b').filter(|r| is_mode(r)) {
        (-1, r)
    } else {
        (0, rest)
    };
    let mode = match rest.trim().to_ascii_lowercase().as_str() {
        "" | "major" | "maj" => Mode::Major,
        "minor" | "min" | "m" => Mode::Minor,
        _ => return None,
    };
    let pc = (natural + shift + 12) % 12;
    Some((pc as u8, mode))
}

/// Canonical "<Tonic> <mode>" spelling with sharps.
pub fn canonical_key(pc: u8, mode: Mode) -> String {
    format!("{} {}", PITCH_CLASS_NAMES[pc as usize % 12], mode)
}

const OPEN_QUOTES: [&str; 4] = ["\"", "“", "``", "”"];
const CLOSE_QUOTES: [&str; 4] = ["\"", "”", "''", "“"];

fn check_balanced(text: &str) -> Result<(), RecordError> {
    let t = text.trim();
    if !t.starts_with('{') || !t.ends_with('}') {
        return Err(RecordError::Parse("record must be enclosed in braces".into()));
    }
    let mut depth = 0i32;
    for (i, c) in t.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 || (depth == 0 && i + 1 != t.len()) {
                    return Err(RecordError::Parse(format!("unbalanced '}}' at byte {i}")));
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(RecordError::Parse("unbalanced '{'".into()));
    }
    Ok(())
}

/// Find a quoted `Name:` key starting at byte `at`. Returns (name, end of colon).
fn key_at(body: &str, at: usize) -> Option<(String, usize)> {
    let s = &body[at..];
    let open = OPEN_QUOTES.iter().find(|q| s.starts_with(*q))?;
    let after_open = &s[open.len()..];
    let (close_pos, close_len) = CLOSE_QUOTES
        .iter()
        .filter_map(|q| after_open.find(q).map(|p| (p, q.len())))
        .min()?;
    let name = &after_open[..close_pos];
    if name.is_empty()
        || name.len() > 40
        || !name.chars().all(|c| c.is_alphanumeric() || c == ' ' || c == '_' || c == '-')
    {
        return None;
    }
    let after_close = &after_open[close_pos + close_len..];
    let trimmed = after_close.trim_start();
    if !trimmed.starts_with(':') {
        return None;
    }
    let consumed = s.len() - trimmed.len() + 1;
    Some((name.trim().to_owned(), at + consumed))
}

fn brace_pairs(text: &str) -> Vec<(String, String)> {
    let t = text.trim();
    let body = &t[1..t.len() - 1];
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    let mut i = 0;
    while i < body.len() {
        if let Some((name, value_start)) = key_at(body, i) {
            keys.push((name, i, value_start));
            i = value_start;
        } else {
            i += body[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    keys.iter()
        .enumerate()
        .map(|(k, (name, _, value_start))| {
            let end = keys.get(k + 1).map_or(body.len(), |next| next.1);
            let value = body[*value_start..end].trim().trim_end_matches(',').trim();
            (name.clone(), strip_quotes(value).to_owned())
        })
        .collect()
}

fn strip_quotes(v: &str) -> &str {
    for (o, c) in OPEN_QUOTES.iter().zip(CLOSE_QUOTES) {
        if v.len() >= o.len() + c.len() && v.starts_with(o) && v.ends_with(c) {
            return &v[o.len()..v.len() - c.len()];
        }
    }
    v
}

fn json_pairs(map: &serde_json::Map<String, Value>) -> Result<Vec<(String, String)>, RecordError> {
    map.iter()
        .map(|(k, v)| {
            let text = match v {
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                Value::Null => String::new(),
                Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(", "),
                Value::Object(_) => {
                    return Err(RecordError::Parse(format!("nested object for {k:?}")))
                }
            };
            Ok((k.clone(), text))
        })
        .collect()
}

fn leading_number(text: &str) -> Option<f64> {
    let t = text.trim();
    let end = t
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || (c == '.' && i > 0)))
        .map_or(t.len(), |(i, _)| i);
    t[..end].trim_end_matches('.').parse().ok()
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Parse a brace-format or JSON metadata record.
pub fn parse_metadata(text: &str) -> Result<MusicMetadata, RecordError> {
    check_balanced(text)?;
    let pairs = match serde_json::from_str::<Value>(text.trim()) {
        Ok(Value::Object(map)) => json_pairs(&map)?,
        _ => brace_pairs(text),
    };

    let mut meta = MusicMetadata::default();
    let mut recognized = 0usize;
    for (name, value) in pairs {
        if value.trim().is_empty() {
            continue;
        }
        let Some(cat) = Category::from_name(&name) else {
            if name.trim().eq_ignore_ascii_case("lyrics") {
                meta.lyrics = Some(value);
            } else {
                meta.extras.insert(name, value);
            }
            continue;
        };
        recognized += 1;
        match cat {
            Category::Genre => meta.genre = Some(value),
            Category::Bpm => {
                let bpm = leading_number(&value)
                    .ok_or_else(|| RecordError::Parse(format!("BPM {value:?} is not numeric")))?;
                meta.bpm = Some(bpm);
            }
            Category::Key => {
                if parse_key(&value).is_none() {
                    return Err(RecordError::Parse(format!("Key {value:?} is not a key")));
                }
                meta.key = Some(value);
            }
            Category::Meter => meta.meter = Some(value),
            Category::Structure => meta.structure = split_list(&value),
            Category::Instruments => meta.instruments = split_list(&value),
            Category::VocalCharacter => meta.vocal_character = split_list(&value),
            Category::LyricThemes => meta.lyric_themes = split_list(&value),
            Category::Theory => meta.theory = Some(value),
            Category::MixNotes => meta.mix_notes = Some(value),
            Category::Dynamics => meta.dynamics = Some(value),
        }
    }
    if recognized == 0 {
        return Err(RecordError::EmptyRecord);
    }
    meta.validate("<parsed>")?;
    Ok(meta)
}
