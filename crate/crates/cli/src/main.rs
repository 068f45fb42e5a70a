use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lexrec::config::PipelineConfig;
use lexrec::pipeline::{Pipeline, Stage};
use lexrec::Exec;

#[derive(Parser)]
#[command(name = "lexrec", version, about = "Generative recommendation over lexical item identifiers")]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the planted-block synthetic dataset.
    SynthData,
    /// Read interactions and items, apply k-core filtering.
    Ingest,
    /// Build the vocabulary and hierarchical identifiers.
    Index,
    /// Train collaborative item embeddings.
    Cf,
    /// Tokenize item prompts, training examples and evaluation cases.
    Prompts,
    /// Train the fusion model.
    Train,
    /// Rank test items and write the metric report.
    Evaluate,
    /// Write top-N recommendations for every user.
    Recommend,
    /// Print the early versus late fusion token account.
    BenchComplexity,
    /// Write the effective configuration as TOML to stdout.
    DumpConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::SynthData => Stage::SynthData,
            Command::Ingest => Stage::Ingest,
            Command::Index => Stage::Index,
            Command::Cf => Stage::Cf,
            Command::Prompts => Stage::Prompts,
            Command::Train => Stage::Train,
            Command::Evaluate => Stage::Evaluate,
            Command::Recommend => Stage::Recommend,
            Command::BenchComplexity => Stage::BenchComplexity,
            Command::DumpConfig => return None,
        })
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if config.out_dir.as_os_str().is_empty() {
        config.out_dir = PathBuf::from("out");
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let exec = match cli.threads {
        Some(1) => Exec::Sequential,
        Some(n) => {
            lexrec::exec::set_threads(n);
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    let Some(stage) = cli.command.stage() else {
        config.validate()?;
        print!("{}", config.to_toml());
        return Ok(());
    };
    let pipeline = Pipeline::new(config, exec)?;
    let summary = pipeline.run(stage).with_context(|| format!("stage {stage}"))?;
    println!("{summary}");
    Ok(())
}

/// `error[<category>]: <message>` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<lexrec::Error>())
        .map_or("internal", |e| e.category());
    let mut parts: Vec<String> = Vec::new();
    for e in err.chain() {
        let text = e.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&text)) {
            parts.push(text);
        }
    }
    let message = parts.join(": ").replace('\n', " ");
    format!("error[{category}]: {message}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
