use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mfkit::audio::{decode_wav, segment, AudioClip};
use mfkit::grpo::toy::{train_tag_task, ToyTrainingConfig};
use mfkit::grpo::{check_gradients, random_case, write_params, GrpoConfig, Policy, RatioMode};
use mfkit::metadata::jsonl::{read_rows, write_rows};
use mfkit::metadata::shard::{load_records, write_shards};
use mfkit::pipeline::{
    augment_all, extract_clip, rewrite_captions, run_job, CorpusClip, CorpusManifest, PipelineJob, ProviderConfig,
    ProviderKind, SegmentMetadata, Stage, StageContext, StageOutput,
};
use mfkit::metadata::{AudioRef, SourceSegment};
use mfkit::reward::{score_predictions, Prediction};
use serde_json::json;

use crate::config::{KeySpec, Settings, UsageError};
use crate::demo::write_demo_corpus;

pub const COMMON: &[KeySpec] = &[
    ("seed", "0", "random seed"),
    ("workers", "0", "worker threads; 0 = logical CPUs"),
];

const PROVIDER: &[KeySpec] = &[
    ("provider", "mock", "`mock` (offline, seeded) or `http`"),
    ("provider_url", "", "endpoint for the http provider"),
    ("cache_dir", "", "on-disk response cache"),
    ("max_in_flight", "4", "concurrent provider requests"),
    ("batch_size", "64", "items per checkpoint batch"),
];

const CORPUS: &[KeySpec] = &[
    ("corpus", "", "corpus manifest JSON {\"clips\": [{\"clip_id\", \"path\"}]}"),
    ("output_dir", "", "job directory; stage outputs and checkpoints live here"),
    ("window_sec", "30", "segment length"),
    ("hop_sec", "", "segment hop; defaults to the window"),
    ("transcribe", "true", "fill lyrics through the transcriber role"),
];

const TOY: &[KeySpec] = &[
    ("output_dir", "", "where metrics.jsonl, summary.json and policy.bin go"),
    ("n_keys", "8", "answer keys in the tag task"),
    ("width", "16", "model width"),
    ("blocks", "2", "attention blocks"),
    ("position_mode", "time", "`time` or `index` rotary positions"),
    ("stride", "0.04", "seconds per token in time mode"),
    ("warmup_steps", "200", "supervised warm-up steps"),
    ("warmup_lr", "0.1", "warm-up learning rate"),
    ("warmup_batch", "16", "warm-up demonstrations per step"),
    ("prompts_per_step", "32", "prompts (groups) per GRPO step"),
    ("eval_samples", "64", "samples per key when evaluating"),
    ("group_size", "5", "completions per prompt"),
    ("clip_eps", "0.2", "ratio clip band"),
    ("kl_coeff", "0.04", "KL penalty weight"),
    ("learning_rate", "1.0", "GRPO learning rate"),
    ("iterations", "300", "GRPO steps"),
    ("std_floor", "1e-8", "advantage std floor"),
    ("ratio_mode", "token", "`token` or `sequence`"),
    ("max_completion_len", "8", "sampling length cap"),
    ("max_grad_norm", "0.3", "gradient norm cap, or `none`"),
];

/// Declared keys of a subcommand, common keys included.
pub fn keys(command: &str) -> Vec<KeySpec> {
    let mut k: Vec<KeySpec> = COMMON.to_vec();
    match command {
        "extract" => {
            k.extend([
                ("in", "", "WAV file (file mode)"),
                ("out", "", "metadata JSONL (file mode)"),
                ("corpus", "", "corpus manifest (job mode, runs the extract stage)"),
                ("output_dir", "", "job directory (job mode)"),
                ("window_sec", "", "segment length; file mode default is the whole file, job mode 30"),
                ("hop_sec", "", "segment hop; defaults to the window"),
                ("transcribe", "false", "fill lyrics through the transcriber role"),
            ]);
            k.extend(PROVIDER);
        }
        "segment" => k.extend([
            ("in", "", "WAV file"),
            ("output_dir", "", "where segment WAVs and segments.json go"),
            ("window_sec", "30", "segment length"),
            ("hop_sec", "", "segment hop; defaults to the window"),
        ]),
        "synthesize" | "create" | "filter" | "think" | "pipeline" => {
            k.extend(CORPUS);
            k.extend(PROVIDER);
            if command == "pipeline" {
                k.push(("stages", "synthesize,extract,create,filter,think", "stages to run, in order"));
            }
        }
        "rewrite" | "augment" => {
            k.extend([("in", "", "records (JSONL file, manifest or shard directory)"), ("output_dir", "", "output shard directory")]);
            k.extend(PROVIDER);
        }
        "score" => k.extend([
            ("pred", "", "predictions JSONL {record_id, output}"),
            ("data", "", "records (JSONL file, manifest or shard directory)"),
            ("out", "", "scored JSONL; stdout when unset"),
        ]),
        "train-grpo" => k.extend(TOY),
        "check-gradients" => k.extend([
            ("instances", "20", "random instances to check"),
            ("h", "1e-4", "finite-difference step"),
            ("tolerance", "1e-4", "largest acceptable relative error"),
            ("out", "", "per-instance JSONL; stdout when unset"),
        ]),
        "demo-corpus" => k.push(("output_dir", "", "where the WAVs, corpus.json and labels.json go")),
        _ => {}
    }
    k
}

pub const COMMANDS: [&str; 13] = [
    "extract", "segment", "synthesize", "create", "rewrite", "augment", "filter", "think", "pipeline", "score",
    "train-grpo", "check-gradients", "demo-corpus",
];

fn output_dir(s: &Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.required("output_dir")?);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.resolved"), s.render())?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_wav(path: &str) -> Result<AudioClip> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {path}"))?;
    Ok(decode_wav(&bytes)?)
}

fn provider(s: &Settings) -> Result<mfkit::provider::ProviderClient> {
    let kind = match s.str("provider") {
        "mock" => ProviderKind::Mock,
        "http" => ProviderKind::Http { url: s.required("provider_url")?.to_owned() },
        other => return Err(UsageError(format!("provider must be mock or http, got {other:?}")).into()),
    };
    let config = ProviderConfig {
        kind,
        cache_dir: s.opt("cache_dir").map(PathBuf::from),
        max_in_flight: s.get("max_in_flight")?,
    };
    Ok(config.build(s.get("seed")?)?)
}

fn stem(path: &str) -> String {
    Path::new(path).file_stem().map_or("clip".into(), |s| s.to_string_lossy().into_owned())
}

pub fn run(command: &str, s: &Settings, workers: usize) -> Result<()> {
    match command {
        "extract" if s.opt("corpus").is_some() => run_stages(s, vec![Stage::Extract], workers),
        "extract" => extract_file(s),
        "segment" => segment_file(s),
        "synthesize" => run_stages(s, vec![Stage::Synthesize], workers),
        "create" => run_stages(s, vec![Stage::Create], workers),
        "filter" => run_stages(s, vec![Stage::Filter], workers),
        "think" => run_stages(s, vec![Stage::Think], workers),
        "pipeline" => {
            let stages = s
                .str("stages")
                .split(',')
                .map(|n| Stage::parse(n).ok_or_else(|| UsageError(format!("unknown stage {n:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            run_stages(s, stages, workers)
        }
        "rewrite" | "augment" => refine(command, s, workers),
        "score" => score(s),
        "train-grpo" => train(s),
        "check-gradients" => gradients(s),
        "demo-corpus" => {
            let dir = output_dir(s)?;
            let n = write_demo_corpus(&dir)?;
            log::info!("wrote {n} clips to {}", dir.display());
            Ok(())
        }
        other => bail!(UsageError(format!("unknown command {other}"))),
    }
}

fn extract_file(s: &Settings) -> Result<()> {
    let input = s.required("in")?;
    let out = s.required("out")?;
    let clip = read_wav(input)?;
    let window: f64 = s.opt_get("window_sec")?.unwrap_or(0.0);
    let windows = if window > 0.0 {
        segment(&clip, window, s.opt_get("hop_sec")?.unwrap_or(window))?
    } else {
        vec![clip]
    };
    let id = stem(input);
    let rows: Vec<SegmentMetadata> = windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let (mut metadata, audit) = extract_clip(w);
            metadata.source_segment = Some(SourceSegment { clip_id: id.clone(), offset_sec: w.offset_sec() });
            SegmentMetadata {
                segment_id: format!("{id}-s{i:03}"),
                audio_ref: AudioRef { path: input.to_owned(), offset_sec: w.offset_sec() },
                metadata,
                audit,
            }
        })
        .collect();
    for r in &rows {
        for a in r.audit.iter().filter(|a| !a.passed) {
            log::warn!("{}: {}", r.segment_id, a.note);
        }
    }
    write(Path::new(out), &write_rows(&rows))?;
    log::info!("wrote {} segment rows to {out}", rows.len());
    Ok(())
}

fn segment_file(s: &Settings) -> Result<()> {
    let input = s.required("in")?;
    let dir = output_dir(s)?;
    let clip = read_wav(input)?;
    let window: f64 = s.get("window_sec")?;
    let windows = segment(&clip, window, s.opt_get("hop_sec")?.unwrap_or(window))?;
    let id = stem(input);
    let mut clips = Vec::new();
    let mut rows = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let seg_id = format!("{id}-s{i:03}");
        let file = format!("{seg_id}.wav");
        write(&dir.join(&file), &mfkit::audio::encode_wav_pcm16(w))?;
        rows.push(json!({"segment_id": seg_id, "offset_sec": w.offset_sec(), "duration_sec": w.duration_sec()}));
        clips.push(CorpusClip { clip_id: seg_id, path: file });
    }
    write(&dir.join("segments.jsonl"), &write_rows(&rows))?;
    write(&dir.join("corpus.json"), &(serde_json::to_vec_pretty(&CorpusManifest { clips })?))?;
    log::info!("{} segments written to {}", windows.len(), dir.display());
    Ok(())
}

fn run_stages(s: &Settings, stages: Vec<Stage>, workers: usize) -> Result<()> {
    let dir = output_dir(s)?;
    let mut job = PipelineJob::new(&dir);
    job.corpus_manifest = s.opt("corpus").map(PathBuf::from);
    job.stages = stages;
    job.seed = s.get("seed")?;
    job.batch_size = s.get("batch_size")?;
    job.workers = workers;
    job.window_sec = s.opt_get("window_sec")?.unwrap_or(30.0);
    job.hop_sec = s.opt_get("hop_sec")?.unwrap_or(job.window_sec);
    job.transcribe = s.get("transcribe")?;
    if let Err(e) = job.validate() {
        bail!(UsageError(e.to_string()));
    }
    let client = provider(s)?;
    let report = run_job(&job, &client)?;
    let stats = client.stats();
    log::info!(
        "provider: {} transport calls, {} cache hits, {} misses",
        stats.transport_calls,
        stats.hits,
        stats.misses
    );
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn refine(command: &str, s: &Settings, workers: usize) -> Result<()> {
    let records = load_records(Path::new(s.required("in")?))?;
    let dir = output_dir(s)?;
    let client = provider(s)?;
    let mut ctx = StageContext::new(Some(&client), s.get("seed")?);
    ctx.batch_size = s.get("batch_size")?;
    ctx.workers = workers;
    ctx.checkpoint_dir = Some(dir.join("checkpoints"));
    let out: StageOutput =
        if command == "rewrite" { rewrite_captions(&records, &ctx)? } else { augment_all(&records, &ctx)? };
    write_shards(&dir, "records", &out.records, 1000)?;
    write(&dir.join("flagged.txt"), out.flagged.iter().map(|f| format!("{f}\n")).collect::<String>().as_bytes())?;
    log::info!("{command}: {} records, {} flagged", out.records.len(), out.flagged.len());
    Ok(())
}

fn score(s: &Settings) -> Result<()> {
    let pred_path = s.required("pred")?;
    let bytes = std::fs::read(pred_path).with_context(|| format!("reading {pred_path}"))?;
    let predictions: Vec<Prediction> = read_rows(&bytes)?;
    let records = load_records(Path::new(s.required("data")?))?;
    let scored = score_predictions(&predictions, &records)?;
    let rows = write_rows(&scored);
    let n = scored.len().max(1) as f64;
    let summary = json!({
        "count": scored.len(),
        "mean_format": scored.iter().map(|p| p.reward.format as f64).sum::<f64>() / n,
        "mean_total": scored.iter().map(|p| p.reward.total).sum::<f64>() / n,
    });
    match s.opt("out") {
        Some(out) => {
            write(Path::new(out), &rows)?;
            println!("{summary}");
        }
        None => print!("{}", String::from_utf8(rows)?),
    }
    log::info!("scored {summary}");
    Ok(())
}

fn toy_config(s: &Settings) -> Result<ToyTrainingConfig> {
    let ratio_mode = match s.str("ratio_mode") {
        "token" => RatioMode::Token,
        "sequence" => RatioMode::Sequence,
        other => bail!(UsageError(format!("ratio_mode must be token or sequence, got {other:?}"))),
    };
    let defaults = ToyTrainingConfig::default();
    Ok(ToyTrainingConfig {
        n_keys: s.get("n_keys")?,
        width: s.get("width")?,
        blocks: s.get("blocks")?,
        position_mode: s.str("position_mode").to_owned(),
        stride: s.get("stride")?,
        warmup_steps: s.get("warmup_steps")?,
        warmup_lr: s.get("warmup_lr")?,
        warmup_batch: s.get("warmup_batch")?,
        prompts_per_step: s.get("prompts_per_step")?,
        eval_samples: s.get("eval_samples")?,
        grpo: GrpoConfig {
            group_size: s.get("group_size")?,
            clip_eps: s.get("clip_eps")?,
            kl_coeff: s.get("kl_coeff")?,
            learning_rate: s.get("learning_rate")?,
            seed: s.get("seed")?,
            iterations: s.get("iterations")?,
            std_floor: s.get("std_floor")?,
            ratio_mode,
            max_completion_len: s.get("max_completion_len")?,
            max_grad_norm: s.opt_get("max_grad_norm")?,
            ..defaults.grpo
        },
    })
}

fn train(s: &Settings) -> Result<()> {
    let config = toy_config(s)?;
    if let Err(e) = config.grpo.validate() {
        bail!(UsageError(e.to_string()));
    }
    let dir = output_dir(s)?;
    let mut metrics = Vec::new();
    let run = train_tag_task(&config, |r| {
        if r.step % 25 == 0 {
            log::info!("step {} mean reward {:.3} loss {:.4} kl {:.4}", r.step, r.mean_reward, r.loss, r.kl);
        }
        metrics.push(r.clone());
    })?;
    write(&dir.join("metrics.jsonl"), &write_rows(&metrics))?;
    write_params(&dir.join("policy.bin"), &run.policy.tensor_shapes(), run.policy.params())?;
    let summary = json!({
        "steps": run.reports.len(),
        "reward_after_warmup": run.reward_after_warmup,
        "final_reward": run.final_reward,
    });
    write(&dir.join("summary.json"), format!("{summary}\n").as_bytes())?;
    println!("{summary}");
    Ok(())
}

/// Largest relative gradient error exceeded the tolerance.
#[derive(Debug)]
pub struct GradientMismatch(pub String);

impl std::fmt::Display for GradientMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GradientMismatch {}

fn gradients(s: &Settings) -> Result<()> {
    let seed: u64 = s.get("seed")?;
    let instances: u64 = s.get("instances")?;
    let h: f64 = s.get("h")?;
    let tolerance: f64 = s.get("tolerance")?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let case = random_case(seed + i)?;
        let err = check_gradients(&case.policy, &case.reference, &case.group, &case.config, h)?;
        worst = worst.max(err);
        rows.push(json!({
            "instance": seed + i,
            "kl_coeff": case.config.kl_coeff,
            "ratio_mode": case.config.ratio_mode,
            "clipped": case.clipped,
            "params": case.policy.params().len(),
            "max_rel_error": err,
        }));
    }
    match s.opt("out") {
        Some(out) => write(Path::new(out), &write_rows(&rows))?,
        None => print!("{}", String::from_utf8(write_rows(&rows))?),
    }
    log::info!("max relative error {worst:e} over {instances} instances (tolerance {tolerance:e})");
    if worst >= tolerance {
        bail!(GradientMismatch(format!("max relative error {worst:e} >= {tolerance:e}")));
    }
    Ok(())
}
