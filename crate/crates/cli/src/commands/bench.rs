//! bench: run matched pixel-vs-latent phases in child processes and report
//! wall time, peak memory, and their ratios.
//!
//! Each phase runs in its own process so peak-RSS figures do not bleed
//! between phases; the parent polls the child's VmHWM at 50 ms.

use anyhow::{bail, Context, Result};
use clap::Args;
use latentdd_core::resources::{read_proc_status_kb, ResourceReport};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    /// Matched distillation iterations for both spaces.
    #[arg(long, default_value_t = 20)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub ipc: usize,
    /// Toy codec settings for the latent side.
    #[arg(long, default_value_t = 8)]
    pub factor: u32,
    #[arg(long, default_value_t = 4)]
    pub c_lat: usize,
    #[arg(long, default_value_t = 2)]
    pub pre_upsample: u32,
    /// Distillation network width.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Directory for intermediate artifacts and reports.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Metadata each measured phase carries so mismatched configurations are
/// refused at comparison time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PhaseMeta {
    pub dataset: String,
    pub iterations: usize,
    pub ipc: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasuredPhase {
    pub report: ResourceReport,
    pub meta: PhaseMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioSummary {
    pub distill_time_ratio: f64,
    pub distill_per_iteration_ratio: f64,
    pub build_time_ratio: f64,
    pub peak_memory_ratio: f64,
    pub latent_cache_bytes: u64,
    pub pixel_cache_bytes: u64,
    pub cache_bytes_ratio: f64,
    pub latent_per_iteration_s: f64,
    pub pixel_per_iteration_s: f64,
}

/// latent / pixel ratios; refuses phases whose configs differ.
pub fn compare_phases(
    pixel_distill: &MeasuredPhase,
    latent_distill: &MeasuredPhase,
    pixel_build: &MeasuredPhase,
    latent_build: &MeasuredPhase,
    pixel_cache_bytes: u64,
    latent_cache_bytes: u64,
) -> Result<RatioSummary> {
    if pixel_distill.meta != latent_distill.meta {
        bail!(
            "refusing to compare mismatched distill configs: {:?} vs {:?}",
            pixel_distill.meta,
            latent_distill.meta
        );
    }
    let iters = pixel_distill.meta.iterations.max(1) as f64;
    let pixel_per_iteration_s = pixel_distill.report.wall_time_s / iters;
    let latent_per_iteration_s = latent_distill.report.wall_time_s / iters;
    Ok(RatioSummary {
        distill_time_ratio: latent_distill.report.wall_time_s / pixel_distill.report.wall_time_s,
        distill_per_iteration_ratio: latent_per_iteration_s / pixel_per_iteration_s,
        build_time_ratio: latent_build.report.wall_time_s / pixel_build.report.wall_time_s,
        peak_memory_ratio: latent_distill.report.peak_main_memory_bytes as f64
            / pixel_distill.report.peak_main_memory_bytes.max(1) as f64,
        latent_cache_bytes,
        pixel_cache_bytes,
        cache_bytes_ratio: latent_cache_bytes as f64 / pixel_cache_bytes.max(1) as f64,
        latent_per_iteration_s,
        pixel_per_iteration_s,
    })
}

/// Spawn this binary with `args`, polling the child's peak RSS.
fn run_phase(phase: &str, args: &[String], meta: PhaseMeta) -> Result<MeasuredPhase> {
    let exe = std::env::current_exe().context("locating own binary")?;
    let started = Instant::now();
    let mut child = Command::new(&exe)
        .args(args)
        .stdout(std::process::Stdio::inherit())
        .stderr(std::process::Stdio::inherit())
        .spawn()
        .with_context(|| format!("spawning phase {phase}"))?;
    let status_path = format!("/proc/{}/status", child.id());
    let mut peak = 0u64;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if let Some(hwm) = read_proc_status_kb(&status_path, "VmHWM") {
            peak = peak.max(hwm);
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    if !status.success() {
        bail!("phase {phase} exited with {status}");
    }
    Ok(MeasuredPhase {
        report: ResourceReport {
            phase: phase.to_string(),
            wall_time_s: started.elapsed().as_secs_f64(),
            peak_main_memory_bytes: peak,
            peak_accel_memory_bytes: None,
        },
        meta,
    })
}

pub fn run(args: BenchArgs, seed: Option<u64>, config_path: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let dir = args.out_dir.canonicalize()?;
    let seed = seed.unwrap_or(0);
    let meta = PhaseMeta {
        dataset: args.dataset.clone(),
        iterations: args.iterations,
        ipc: args.ipc,
    };
    let mut common: Vec<String> = vec!["--seed".into(), seed.to_string()];
    if let Some(cfg) = config_path {
        common.push("--config".into());
        common.push(cfg.display().to_string());
    }

    let pixel_cache = dir.join("pixel.lddc");
    let latent_cache = dir.join("latent.lddc");
    let codec_file = dir.join("codec.lddw");

    let arg = |parts: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
        v.extend(common.iter().cloned());
        v
    };

    let build_pixel = run_phase(
        "build-pixel",
        &arg(&[
            "build-latents",
            "--dataset",
            &args.dataset,
            "--codec",
            "identity",
            "--out",
            &pixel_cache.display().to_string(),
            "--force",
        ]),
        meta.clone(),
    )?;
    let build_latent = run_phase(
        "build-latent",
        &arg(&[
            "build-latents",
            "--dataset",
            &args.dataset,
            "--codec",
            "toy",
            "--codec-file",
            &codec_file.display().to_string(),
            "--factor",
            &args.factor.to_string(),
            "--c-lat",
            &args.c_lat.to_string(),
            "--pre-upsample",
            &args.pre_upsample.to_string(),
            "--out",
            &latent_cache.display().to_string(),
            "--force",
        ]),
        meta.clone(),
    )?;

    let iters = args.iterations.to_string();
    let ipc = args.ipc.to_string();
    let width = args.width.to_string();
    let distill_pixel = run_phase(
        "distill-pixel-dc",
        &arg(&[
            "distill",
            "--algo",
            "dc",
            "--cache",
            &pixel_cache.display().to_string(),
            "--ipc",
            &ipc,
            "--iterations",
            &iters,
            "--width",
            &width,
            "--out",
            &dir.join("pixel-syn.lddc").display().to_string(),
        ]),
        meta.clone(),
    )?;
    let distill_latent = run_phase(
        "distill-latent-dc",
        &arg(&[
            "distill",
            "--algo",
            "dc",
            "--cache",
            &latent_cache.display().to_string(),
            "--ipc",
            &ipc,
            "--iterations",
            &iters,
            "--width",
            &width,
            "--out",
            &dir.join("latent-syn.lddc").display().to_string(),
        ]),
        meta.clone(),
    )?;

    let pixel_bytes = std::fs::metadata(&pixel_cache)?.len();
    let latent_bytes = std::fs::metadata(&latent_cache)?.len();
    let summary = compare_phases(
        &distill_pixel,
        &distill_latent,
        &build_pixel,
        &build_latent,
        pixel_bytes,
        latent_bytes,
    )?;

    let phases = [
        &build_pixel,
        &build_latent,
        &distill_pixel,
        &distill_latent,
    ];
    let phases_path = dir.join("bench-phases.jsonl");
    {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(&phases_path)?);
        for p in phases {
            writeln!(w, "{}", serde_json::to_string(p)?)?;
        }
    }
    let summary_path = dir.join("bench-summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    println!("\nphase                wall(s)   peak mem (MB)");
    for p in phases {
        println!(
            "{:<20} {:>8.2} {:>12}",
            p.report.phase,
            p.report.wall_time_s,
            p.report.peak_main_memory_bytes / (1 << 20)
        );
    }
    println!(
        "\nper-iteration distill: latent {:.3}s vs pixel {:.3}s (ratio {:.3})",
        summary.latent_per_iteration_s,
        summary.pixel_per_iteration_s,
        summary.distill_per_iteration_ratio
    );
    println!(
        "cache bytes: latent {} vs pixel {} (ratio {:.3})",
        summary.latent_cache_bytes, summary.pixel_cache_bytes, summary.cache_bytes_ratio
    );
    println!("wrote {} and {}", phases_path.display(), summary_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phase(name: &str, wall: f64, mem: u64, iters: usize) -> MeasuredPhase {
        MeasuredPhase {
            report: ResourceReport {
                phase: name.into(),
                wall_time_s: wall,
                peak_main_memory_bytes: mem,
                peak_accel_memory_bytes: None,
            },
            meta: PhaseMeta {
                dataset: "toy".into(),
                iterations: iters,
                ipc: 1,
            },
        }
    }

    #[test]
    fn identical_phases_give_unit_ratios() {
        let p = phase("x", 2.0, 1000, 10);
        let s = compare_phases(&p, &p, &p, &p, 500, 500).unwrap();
        assert!((s.distill_time_ratio - 1.0).abs() < 1e-12);
        assert!((s.distill_per_iteration_ratio - 1.0).abs() < 1e-12);
        assert!((s.build_time_ratio - 1.0).abs() < 1e-12);
        assert!((s.cache_bytes_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_configs_refused() {
        let a = phase("a", 2.0, 1000, 10);
        let b = phase("b", 1.0, 1000, 20);
        assert!(compare_phases(&a, &b, &a, &a, 1, 1).is_err());
    }
}
