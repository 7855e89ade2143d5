//! JSONL shard files plus a manifest listing each shard's path, record count
//! and SHA-256 content hash.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::record::{parse_records, serialize_records, DatasetRecord};
use super::RecordError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("manifest is malformed: {0}")]
    Manifest(String),
    #[error("shard {path} hash mismatch: manifest {expected}, file {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("shard {path} holds {actual} records, manifest says {expected}")]
    CountMismatch {
        path: String,
        expected: usize,
        actual: usize,
    },
}

impl ShardError {
    pub fn class_name(&self) -> &'static str {
        match self {
            ShardError::Io { .. } => "IoError",
            ShardError::Record(e) => e.class_name(),
            ShardError::Manifest(_) => "ManifestError",
            ShardError::HashMismatch { .. } => "HashMismatch",
            ShardError::CountMismatch { .. } => "CountMismatch",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ShardError + '_ {
    move |source| ShardError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub total_records: usize,
    pub shards: Vec<ShardEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `records` as `<prefix>-NNNNN.jsonl` shards of at most `shard_size`
/// records into `dir`, followed by `manifest.json`.
pub fn write_shards(
    dir: &Path,
    prefix: &str,
    records: &[DatasetRecord],
    shard_size: usize,
) -> Result<Manifest, ShardError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let shard_size = shard_size.max(1);
    let mut shards = Vec::new();
    for (i, chunk) in records.chunks(shard_size).enumerate() {
        let name = format!("{prefix}-{i:05}.jsonl");
        let bytes = serialize_records(chunk)?;
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        shards.push(ShardEntry {
            path: name,
            records: chunk.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        total_records: records.len(),
        shards,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, ShardError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| ShardError::Manifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(ShardError::Manifest(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Load every record listed in a manifest, verifying hashes and counts.
pub fn read_shards(manifest_path: &Path) -> Result<Vec<DatasetRecord>, ShardError> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.total_records);
    for entry in &manifest.shards {
        let path = base.join(&entry.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(ShardError::HashMismatch {
                path: entry.path.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let records = parse_records(&bytes)?;
        if records.len() != entry.records {
            return Err(ShardError::CountMismatch {
                path: entry.path.clone(),
                expected: entry.records,
                actual: records.len(),
            });
        }
        out.extend(records);
    }
    Ok(out)
}

/// Read records from either a manifest or a single JSONL file.
pub fn load_records(path: &Path) -> Result<Vec<DatasetRecord>, ShardError> {
    if path.file_name().is_some_and(|n| n == MANIFEST_FILE) || path.is_dir() {
        let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_owned() };
        return read_shards(&manifest);
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(parse_records(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::{AudioRef, MusicMetadata, RecordKind};

    fn rec(i: usize) -> DatasetRecord {
        DatasetRecord {
            record_id: format!("seg{i}"),
            kind: RecordKind::Caption,
            audio_ref: AudioRef { path: "a.wav".into(), offset_sec: 0.0 },
            skill: None,
            prompt: "p".into(),
            target: format!("caption {i}"),
            options: None,
            answer_index: None,
            think: None,
            metadata: MusicMetadata::default(),
            stage_audit: vec![],
        }
    }

    #[test]
    fn shards_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..7).map(rec).collect();
        let manifest = write_shards(dir.path(), "captions", &records, 3).unwrap();
        assert_eq!(manifest.shards.len(), 3);
        assert_eq!(manifest.shards.iter().map(|s| s.records).sum::<usize>(), 7);
        assert_eq!(read_shards(&dir.path().join(MANIFEST_FILE)).unwrap(), records);
        assert_eq!(load_records(dir.path()).unwrap(), records);
    }

    #[test]
    fn tampered_shard_detected() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..2).map(rec).collect();
        write_shards(dir.path(), "x", &records, 10).unwrap();
        let shard = dir.path().join("x-00000.jsonl");
        let mut bytes = fs::read(&shard).unwrap();
        bytes.extend_from_slice(b"\n");
        fs::write(&shard, bytes).unwrap();
        assert!(matches!(
            read_shards(&dir.path().join(MANIFEST_FILE)),
            Err(ShardError::HashMismatch { .. })
        ));
    }
}
