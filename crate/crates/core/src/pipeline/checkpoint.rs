//! Append-only per-stage checkpoint files.
//!
//! The first line is a header naming the stage and a fingerprint of its
//! inputs; each further line is `{"item": id, "output": ...}`. A header
//! mismatch means the inputs changed, and the file is started afresh.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::stages::StageContext;
use super::{PipelineError, Result};
use crate::metadata::shard::sha256_hex;
use crate::provider::bounded_map;

#[derive(Serialize, Deserialize, PartialEq)]
struct Header {
    stage: String,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Entry<O> {
    item: String,
    output: O,
}

struct Checkpoint {
    path: PathBuf,
    done: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    fn open(dir: &Path, stage: &str, fingerprint: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(PipelineError::io(dir))?;
        let path = dir.join(format!("{stage}.jsonl"));
        let header = Header { stage: stage.to_owned(), fingerprint: fingerprint.to_owned() };
        let mut done = BTreeMap::new();
        let mut fresh = true;
        if let Ok(text) = std::fs::read_to_string(&path) {
            let mut lines = text.lines();
            if lines.next().and_then(|l| serde_json::from_str::<Header>(l).ok()).is_some_and(|h| h == header) {
                fresh = false;
                // a torn final line from a crash is ignored
                for line in lines {
                    if let Ok(e) = serde_json::from_str::<Entry<serde_json::Value>>(line) {
                        done.insert(e.item, e.output);
                    }
                }
            } else {
                log::warn!("{stage}: checkpoint inputs changed, starting over");
            }
        }
        if fresh {
            let mut line = serde_json::to_string(&header).expect("header serializes");
            line.push('\n');
            std::fs::write(&path, line).map_err(PipelineError::io(&path))?;
        }
        Ok(Self { path, done })
    }

    fn append<O: Serialize>(&mut self, entries: &[(String, O)]) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for (item, output) in entries {
            serde_json::to_writer(&mut buf, &Entry { item: item.clone(), output }).expect("entry serializes");
            buf.push(b'\n');
        }
        let mut file: File = OpenOptions::new().append(true).open(&self.path).map_err(PipelineError::io(&self.path))?;
        file.write_all(&buf).map_err(PipelineError::io(&self.path))?;
        file.sync_data().map_err(PipelineError::io(&self.path))?;
        for (item, output) in entries {
            self.done.insert(item.clone(), serde_json::to_value(output).expect("entry serializes"));
        }
        Ok(())
    }
}

/// Map `f` over `items` in batches, skipping items already recorded in the
/// stage checkpoint. On failure the batch's successes are still recorded
/// and the first error (in item order) is returned.
pub(crate) fn run_batched<I, O, F>(ctx: &StageContext, stage: &str, items: &[I], id: impl Fn(&I) -> String, f: F) -> Result<Vec<O>>
where
    I: Serialize + Sync,
    O: Serialize + DeserializeOwned + Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    let ids: Vec<String> = items.iter().map(&id).collect();
    let mut checkpoint = match &ctx.checkpoint_dir {
        Some(dir) => {
            let inputs = serde_json::to_vec(&(stage, ctx.seed, items)).expect("items serialize");
            Some(Checkpoint::open(dir, stage, &sha256_hex(&inputs))?)
        }
        None => None,
    };
    let mut outputs: Vec<Option<O>> = Vec::with_capacity(items.len());
    let mut pending = Vec::new();
    for (i, item_id) in ids.iter().enumerate() {
        let cached = checkpoint.as_ref().and_then(|c| c.done.get(item_id));
        match cached.map(|v| serde_json::from_value::<O>(v.clone())) {
            Some(Ok(o)) => outputs.push(Some(o)),
            _ => {
                outputs.push(None);
                pending.push(i);
            }
        }
    }
    if !pending.is_empty() && pending.len() < items.len() {
        log::info!("{stage}: resuming, {} of {} items already done", items.len() - pending.len(), items.len());
    }
    let failed = AtomicBool::new(false);
    for batch in pending.chunks(ctx.batch_size.max(1)) {
        let results = bounded_map(batch, ctx.workers(), |&i| {
            if failed.load(Ordering::SeqCst) {
                return None;
            }
            let r = f(&items[i]);
            if r.is_err() {
                failed.store(true, Ordering::SeqCst);
            }
            Some(r)
        });
        let mut done = Vec::new();
        let mut first_err = None;
        for (&i, r) in batch.iter().zip(results) {
            match r {
                Some(Ok(o)) => done.push((i, o)),
                Some(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                None => {}
            }
        }
        if let Some(c) = checkpoint.as_mut() {
            let entries: Vec<(String, &O)> = done.iter().map(|(i, o)| (ids[*i].clone(), o)).collect();
            c.append(&entries)?;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        for (i, o) in done {
            outputs[i] = Some(o);
        }
    }
    Ok(outputs.into_iter().map(|o| o.expect("every item processed")).collect())
}
