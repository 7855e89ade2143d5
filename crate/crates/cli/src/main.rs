//! `mfkit`: dataset construction, reward scoring and GRPO training.

mod commands;
mod config;
mod demo;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_override, Settings, UsageError};

#[derive(Parser, Debug)]
#[command(name = "mfkit", version, about = "Music-understanding dataset and post-training toolkit")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(short = 's', long = "set", global = true, value_parser = parse_override)]
    set: Vec<(String, String)>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 means one per logical CPU.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Shorthand flags for common keys. Each one is a usage error on a command
/// that does not declare the key.
#[derive(Args, Debug, Default)]
struct Paths {
    #[arg(long = "in")]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long = "out-dir")]
    out_dir: Option<String>,
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    pred: Option<String>,
    #[arg(long)]
    data: Option<String>,
}

impl Paths {
    fn pairs(&self) -> Vec<(String, String)> {
        [
            ("in", &self.input),
            ("out", &self.out),
            ("output_dir", &self.out_dir),
            ("corpus", &self.corpus),
            ("pred", &self.pred),
            ("data", &self.data),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k.to_owned(), v)))
        .collect()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Signal-derived metadata for a WAV file or a corpus.
    Extract(Paths),
    /// Cut a WAV file into fixed windows.
    Segment(Paths),
    /// Stage 1: initial captions from audio.
    Synthesize(Paths),
    /// Stage 3: metadata-grounded captions and QA.
    Create(Paths),
    /// Rewrite captions against their metadata.
    Rewrite(Paths),
    /// Grow QA option lists.
    Augment(Paths),
    /// Stage 4: quality filter and hard-example selection.
    Filter(Paths),
    /// Stage 5: chain-of-thought construction and verification.
    Think(Paths),
    /// Several stages in one job.
    Pipeline(Paths),
    /// Score model outputs against dataset records.
    Score(Paths),
    /// Warm-up plus GRPO on the toy tag task.
    TrainGrpo(Paths),
    /// Compare analytic and finite-difference GRPO gradients.
    CheckGradients(Paths),
    /// Write a small synthetic corpus with known labels.
    DemoCorpus(Paths),
    /// Print the config key reference for every command as markdown.
    Keys,
}

impl Command {
    fn split(&self) -> (&'static str, Option<&Paths>) {
        match self {
            Command::Extract(p) => ("extract", Some(p)),
            Command::Segment(p) => ("segment", Some(p)),
            Command::Synthesize(p) => ("synthesize", Some(p)),
            Command::Create(p) => ("create", Some(p)),
            Command::Rewrite(p) => ("rewrite", Some(p)),
            Command::Augment(p) => ("augment", Some(p)),
            Command::Filter(p) => ("filter", Some(p)),
            Command::Think(p) => ("think", Some(p)),
            Command::Pipeline(p) => ("pipeline", Some(p)),
            Command::Score(p) => ("score", Some(p)),
            Command::TrainGrpo(p) => ("train-grpo", Some(p)),
            Command::CheckGradients(p) => ("check-gradients", Some(p)),
            Command::DemoCorpus(p) => ("demo-corpus", Some(p)),
            Command::Keys => ("keys", None),
        }
    }
}

fn key_reference() -> String {
    let mut out = String::from("# mfkit config keys\n");
    for cmd in commands::COMMANDS {
        out.push_str(&format!("\n## {cmd}\n\n| key | default | meaning |\n|---|---|---|\n"));
        for (k, d, desc) in commands::keys(cmd) {
            out.push_str(&format!("| `{k}` | `{d}` | {desc} |\n"));
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let (name, paths) = cli.command.split();
    let Some(paths) = paths else {
        print!("{}", key_reference());
        return Ok(());
    };
    let mut overrides = paths.pairs();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    overrides.extend(cli.set.iter().cloned());
    let settings = Settings::resolve(&commands::keys(name), cli.config.as_deref(), &overrides)?;
    log::info!("{name} resolved config:\n{}", settings.render().trim_end());

    let mut workers: usize = settings.get("workers")?;
    if workers == 0 {
        workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    }
    // Only fails when a pool already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    commands::run(name, &settings, workers)
}

fn error_class(e: &anyhow::Error) -> &'static str {
    use mfkit::audio::AudioError;
    use mfkit::grpo::GrpoError;
    use mfkit::metadata::shard::ShardError;
    use mfkit::metadata::RecordError;
    use mfkit::pipeline::PipelineError;
    use mfkit::provider::ProviderError;
    use mfkit::reward::RewardError;
    use mfkit::rote::RoteError;
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<PipelineError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<GrpoError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<RewardError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<ShardError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<RecordError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<AudioError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<ProviderError>() {
            return x.class_name();
        }
        if let Some(x) = cause.downcast_ref::<RoteError>() {
            return x.class_name();
        }
        if cause.is::<commands::GradientMismatch>() {
            return "GradientMismatch";
        }
        if cause.is::<std::io::Error>() {
            return "IoError";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error[{}]: {e:#}", error_class(&e));
            ExitCode::from(1)
        }
    }
}
