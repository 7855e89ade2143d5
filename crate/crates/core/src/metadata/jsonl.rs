//! Generic JSONL row helpers.

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::RecordError;

pub fn write_rows<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("row types serialize infallibly");
        out.push(b'\n');
    }
    out
}

pub fn read_rows<T: DeserializeOwned>(bytes: &[u8]) -> Result<Vec<T>, RecordError> {
    let text = std::str::from_utf8(bytes).map_err(|e| RecordError::Parse(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RecordError::Parse(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
