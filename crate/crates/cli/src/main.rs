//! Command-line pipeline: ingest -> encode -> distill -> decode -> evaluate
//! -> benchmark, all reproducible from a seed and a config file.

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

mod commands;
mod config;
mod ingest;
mod registry;

#[derive(Parser)]
#[command(
    name = "latentdd",
    version,
    about = "Dataset distillation in latent space",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for every stage this invocation runs (flag > config > default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Nested key-value config file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a dataset into a latent cache (training the desk-scale codec
    /// on first use).
    BuildLatents(commands::build::BuildArgs),
    /// Pre-train expert trajectories on a latent cache.
    Buffer(commands::buffer::BufferArgs),
    /// Distill a latent cache into a synthetic set with dc, dm, or mtt.
    Distill(commands::distill::DistillArgs),
    /// Decode a synthetic set and score it with repeated classifier
    /// trainings.
    Eval(commands::eval::EvalArgs),
    /// Run matched pixel-vs-latent phases and report time/memory.
    Bench(commands::bench::BenchArgs),
    /// Render traces, eval reports, and bench summaries.
    Report(commands::report::ReportArgs),
}

/// Relative output paths land under $LATENTDD_CACHE_DIR when it is set.
pub(crate) fn resolve_path(path: &std::path::Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(dir) = std::env::var("LATENTDD_CACHE_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir).join(path);
            }
        }
    }
    path.to_path_buf()
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let file_config = match config::FileConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    };
    let result: Result<()> = match cli.command {
        Command::BuildLatents(args) => commands::build::run(args, cli.seed, &file_config),
        Command::Buffer(args) => commands::buffer::run(args, cli.seed, &file_config),
        Command::Distill(args) => commands::distill::run(args, cli.seed, &file_config),
        Command::Eval(args) => commands::eval::run(args, cli.seed, &file_config),
        Command::Bench(args) => commands::bench::run(args, cli.seed, cli.config.as_deref()),
        Command::Report(args) => commands::report::run(args),
    };
    if let Err(e) = result {
        if let Some(latentdd_core::Error::FingerprintMismatch { expected, found }) =
            e.downcast_ref::<latentdd_core::Error>()
        {
            eprintln!(
                "error: fingerprint mismatch (expected {expected}, found {found}).\n\
                 The artifact was produced with a different codec or cache. Rebuild the\n\
                 cache with `latentdd build-latents` using the same --codec-file, or point\n\
                 this command at the matching files."
            );
        } else {
            eprintln!("error: {e:#}");
        }
        std::process::exit(1);
    }
}
