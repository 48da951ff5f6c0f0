//! report: render traces, eval reports, and bench summaries to tables and
//! SVG plot files.

use crate::resolve_path;
use anyhow::{Context, Result};
use clap::Args;
use latentdd_core::io::{read_eval_report_records, read_trace_records};
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct ReportArgs {
    /// Loss-trace record files (JSONL).
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Eval report record files (JSONL).
    #[arg(long)]
    pub eval: Vec<PathBuf>,
    /// Bench summary files (JSON).
    #[arg(long)]
    pub bench: Vec<PathBuf>,
    /// Directory for SVG plots of traces.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(args: ReportArgs) -> Result<()> {
    if !args.trace.is_empty() {
        println!("trace                          records   first-third   last-third");
        for path in &args.trace {
            let path = resolve_path(path);
            let trace = read_trace_records(&path)?;
            let losses: Vec<f32> = trace.iter().map(|r| r.loss).collect();
            let third = (losses.len() / 3).max(1);
            let first = median(&losses[..third.min(losses.len())]);
            let last = median(&losses[losses.len().saturating_sub(third)..]);
            println!(
                "{:<30} {:>7} {:>13.5} {:>12.5}",
                trim_name(&path),
                losses.len(),
                first,
                last
            );
            if let Some(dir) = &args.out_dir {
                std::fs::create_dir_all(dir)?;
                let svg = dir.join(format!("{}.svg", stem(&path)));
                write_svg_line_plot(&svg, &losses)?;
                println!("  plot: {}", svg.display());
            }
        }
    }

    if !args.eval.is_empty() {
        println!("\neval report                    runs      mean       std    depth");
        for path in &args.eval {
            let path = resolve_path(path);
            let report = read_eval_report_records(&path)?;
            println!(
                "{:<30} {:>5} {:>9.4} {:>9.4} {:>8}",
                trim_name(&path),
                report.accuracies.len(),
                report.mean,
                report.std,
                report.depth
            );
        }
    }

    for path in &args.bench {
        let path = resolve_path(path);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let summary: super::bench::RatioSummary = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        println!("\nbench summary {}:", trim_name(&path));
        println!(
            "  distill per-iteration ratio (latent/pixel): {:.3}",
            summary.distill_per_iteration_ratio
        );
        println!("  build time ratio:  {:.3}", summary.build_time_ratio);
        println!("  cache bytes ratio: {:.3}", summary.cache_bytes_ratio);
    }
    Ok(())
}

fn median(xs: &[f32]) -> f32 {
    if xs.is_empty() {
        return f32::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn trim_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into())
}

/// Minimal self-contained polyline plot.
pub fn write_svg_line_plot(path: &Path, values: &[f32]) -> Result<()> {
    let (w, h, pad) = (640.0f32, 360.0f32, 40.0f32);
    let finite: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let (lo, hi) = finite.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-9);
    let n = values.len().max(2) as f32;
    let mut points = String::new();
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let x = pad + (w - 2.0 * pad) * i as f32 / (n - 1.0);
        let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
        points.push_str(&format!("{x:.1},{y:.1} "));
    }
    let svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<polyline points="{points}" fill="none" stroke="#2060c0" stroke-width="1.5"/>
<line x1="{pad}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="#444"/>
<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{yb}" stroke="#444"/>
<text x="{pad}" y="{ty}" font-size="12" fill="#444">min {lo:.4}  max {hi:.4}  n {count}</text>
</svg>
"##,
        yb = h - pad,
        xr = w - pad,
        ty = h - 10.0,
        count = values.len(),
    );
    std::fs::write(path, svg)?;
    Ok(())
}
