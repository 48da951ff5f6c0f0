//! buffer: latent cache + network spec -> expert trajectory file.

use crate::config::FileConfig;
use crate::resolve_path;
use anyhow::Result;
use clap::Args;
use latentdd_core::distill::buffer_trajectories;
use latentdd_core::io::{read_cache, write_trajectory_buffer};
use latentdd_core::networks::{depth_for_resolution, ConvNetSpec, Space};
use latentdd_core::resources::measure_phase;
use std::path::PathBuf;

#[derive(Args)]
pub struct BufferArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub experts: usize,
    /// Buffered epochs per expert; must cover max_start_epoch +
    /// expert_epochs of the matching run (default leaves 2 of headroom).
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    /// Network depth (defaults to the latent schedule for this cache).
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: BufferArgs, seed: Option<u64>, config: &FileConfig) -> Result<()> {
    let lat = read_cache(&resolve_path(&args.cache))?;
    let ef = lat.effective_factor();
    let (h, w) = lat.spatial();
    let depth = match args.depth {
        Some(d) => d,
        None => depth_for_resolution(h * ef as usize, Space::Latent, ef)?,
    };
    let spec = ConvNetSpec::new(depth, lat.c_lat(), lat.num_classes, (h, w), args.width)?;

    let mut expert_cfg = config.expert.clone().unwrap_or_default();
    if let Some(lr) = args.lr {
        expert_cfg.lr = lr;
    }
    if let Some(b) = args.batch {
        expert_cfg.batch_size = b;
    }
    if let Some(s) = seed {
        expert_cfg.seed = s;
    }

    let (buffer, report) = measure_phase("buffer", || {
        buffer_trajectories(&lat, &spec, args.experts, args.epochs, &expert_cfg)
    });
    let buffer = buffer?;
    let out = resolve_path(&args.out);
    write_trajectory_buffer(&out, &buffer)?;
    println!(
        "wrote {}: {} experts x {} epochs, {} params/snapshot, {} skipped, {:.1}s, peak mem {} MB",
        out.display(),
        buffer.experts.len(),
        buffer.epochs_per_expert,
        spec.param_count(),
        buffer.skipped,
        report.wall_time_s,
        report.peak_main_memory_bytes / (1 << 20)
    );
    Ok(())
}
