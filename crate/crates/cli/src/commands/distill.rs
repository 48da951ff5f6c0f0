//! distill: latent cache -> optimized synthetic set + loss trace.

use crate::config::FileConfig;
use crate::resolve_path;
use anyhow::{bail, Context, Result};
use clap::Args;
use latentdd_core::data::{init_synthetic, Algorithm, BudgetSpec};
use latentdd_core::distill::{distill_dc, distill_dm, distill_mtt};
use latentdd_core::io::{
    read_cache, read_trajectory_buffer, write_synthetic_set, write_trace_records,
    SyntheticFileMeta,
};
use latentdd_core::networks::{depth_for_resolution, ConvNetSpec, NetFactory, Space};
use latentdd_core::resources::measure_phase;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Args)]
pub struct DistillArgs {
    /// Matching algorithm: dc, dm, or mtt.
    #[arg(long)]
    pub algo: String,
    #[arg(long)]
    pub cache: PathBuf,
    /// Storage budget in images per class; the latent budget is derived.
    #[arg(long, default_value_t = 1)]
    pub ipc: usize,
    /// Effective downsampling factor; must match the cache (sanity flag).
    #[arg(long)]
    pub factor: Option<u32>,
    /// Trajectory buffer file (mtt only).
    #[arg(long)]
    pub buffer: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eta_base: Option<f32>,
    /// Width of the distillation-time network.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Depth override (defaults to the latent schedule).
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-trace record file (JSONL).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn run(args: DistillArgs, seed: Option<u64>, config: &FileConfig) -> Result<()> {
    let algo = Algorithm::from_str(&args.algo)?;
    let lat = read_cache(&resolve_path(&args.cache))?;
    let ef = lat.effective_factor();
    if let Some(f) = args.factor {
        if f != ef {
            bail!(
                "--factor {f} does not match the cache's effective factor {ef}; \
                 rebuild the cache or drop the flag"
            );
        }
    }
    let budget = BudgetSpec::new(args.ipc, ef, lat.c_lat())?;
    println!(
        "budget: ipc {} -> lpc {} (effective f={}, c_lat={})",
        budget.ipc, budget.lpc, ef, lat.c_lat()
    );

    let (h, w) = lat.spatial();
    let depth = match args.depth {
        Some(d) => d,
        None => depth_for_resolution(h * ef as usize, Space::Latent, ef)?,
    };
    let spec = ConvNetSpec::new(depth, lat.c_lat(), lat.num_classes, (h, w), args.width)?;

    let run_seed = seed.unwrap_or(0);
    let mut syn = init_synthetic(&lat, &budget, run_seed)?;
    let factory = NetFactory::new(spec, run_seed.wrapping_add(0x5EED));

    let meta = SyntheticFileMeta {
        factor: lat.factor,
        pre_upsample: lat.pre_upsample,
        codec_fingerprint: lat.codec_fingerprint.clone(),
    };

    let (trace, iterations) = match algo {
        Algorithm::Init => {
            // Undistilled baseline: write the initialization as-is.
            (Vec::new(), 0)
        }
        Algorithm::Dc => {
            let mut cfg = config.dc.clone().unwrap_or_default();
            apply_common(&mut cfg.iterations, &mut cfg.batch_size, &mut cfg.eta_base, &args);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (trace, report) =
                measure_phase("distill-dc", || distill_dc(&lat, &mut syn, &cfg, &factory));
            let trace = trace?;
            print_phase(&report, cfg.iterations, trace.last().map(|r| r.loss));
            (trace, cfg.iterations)
        }
        Algorithm::Dm => {
            let mut cfg = config.dm.clone().unwrap_or_default();
            apply_common(&mut cfg.iterations, &mut cfg.batch_size, &mut cfg.eta_base, &args);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (trace, report) =
                measure_phase("distill-dm", || distill_dm(&lat, &mut syn, &cfg, &factory));
            let trace = trace?;
            print_phase(&report, cfg.iterations, trace.last().map(|r| r.loss));
            (trace, cfg.iterations)
        }
        Algorithm::Mtt => {
            let buffer_path = args
                .buffer
                .as_ref()
                .context("--algo mtt needs --buffer with expert trajectories")?;
            let buffer = read_trajectory_buffer(
                &resolve_path(buffer_path),
                Some(&lat.content_fingerprint()),
            )?;
            let mut cfg = config.mtt.clone().unwrap_or_default();
            apply_common(&mut cfg.iterations, &mut cfg.batch_size, &mut cfg.eta_base, &args);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (out, report) =
                measure_phase("distill-mtt", || distill_mtt(&lat, &mut syn, &buffer, &cfg));
            let (trace, final_eta) = out?;
            print_phase(&report, cfg.iterations, trace.last().map(|r| r.loss));
            println!("final model lr: {final_eta:.6}");
            (trace, cfg.iterations)
        }
    };

    syn.meta.algorithm = algo;
    syn.meta.seed = run_seed;
    syn.meta.iterations = iterations;

    let out = resolve_path(&args.out);
    write_synthetic_set(&out, &syn, &meta)?;
    println!(
        "wrote {}: {} latents ({} per class)",
        out.display(),
        syn.len(),
        syn.budget.lpc
    );
    if let Some(trace_path) = &args.trace {
        let trace_path = resolve_path(trace_path);
        write_trace_records(&trace_path, &trace)?;
        println!("wrote {} ({} records)", trace_path.display(), trace.len());
    }
    Ok(())
}

fn apply_common(
    iterations: &mut usize,
    batch: &mut usize,
    eta: &mut f32,
    args: &DistillArgs,
) {
    crate::config::override_opt(iterations, args.iterations);
    crate::config::override_opt(batch, args.batch_size);
    crate::config::override_opt(eta, args.eta_base);
}

fn print_phase(
    report: &latentdd_core::resources::ResourceReport,
    iterations: usize,
    last_loss: Option<f32>,
) {
    let per_iter = if iterations > 0 {
        report.wall_time_s / iterations as f64
    } else {
        0.0
    };
    println!(
        "{}: {:.1}s total, {:.3}s/iteration, peak mem {} MB, last loss {}",
        report.phase,
        report.wall_time_s,
        per_iter,
        report.peak_main_memory_bytes / (1 << 20),
        last_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "-".into())
    );
}
