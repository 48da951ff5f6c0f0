//! eval: synthetic set + test split -> evaluation report file.

use crate::config::FileConfig;
use crate::{registry, resolve_path};
use anyhow::{bail, Result};
use clap::Args;
use latentdd_core::codec::{IdentityCodec, LatentCodec, ResamplePolicy};
use latentdd_core::eval::evaluate_synthetic;
use latentdd_core::io::{read_synthetic_set, write_eval_report_records};
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Trained codec weights; required unless the set was built with the
    /// identity codec. The fingerprint must match the synthetic file.
    #[arg(long)]
    pub codec_file: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: EvalArgs, seed: Option<u64>, config: &FileConfig) -> Result<()> {
    let (syn, meta) = read_synthetic_set(&resolve_path(&args.synthetic))?;
    println!(
        "synthetic set: {} latents ({} per class), algorithm {}, seed {}",
        syn.len(),
        syn.budget.lpc,
        syn.meta.algorithm.as_str(),
        syn.meta.seed
    );

    let codec: Box<dyn LatentCodec> = if meta.codec_fingerprint == "identity" {
        Box::new(IdentityCodec)
    } else {
        let Some(path) = &args.codec_file else {
            bail!(
                "this synthetic set was encoded with a trained codec; pass --codec-file \
                 with the matching weights"
            );
        };
        let codec = latentdd_core::io::load_codec(&resolve_path(path))?;
        use latentdd_core::codec::LatentCodec as _;
        if codec.fingerprint() != meta.codec_fingerprint {
            return Err(latentdd_core::Error::FingerprintMismatch {
                expected: meta.codec_fingerprint.clone(),
                found: codec.fingerprint(),
            }
            .into());
        }
        Box::new(codec)
    };
    let policy = if meta.pre_upsample > 1 {
        ResamplePolicy::upsample(meta.pre_upsample)
    } else {
        ResamplePolicy::identity()
    };

    let entry = registry::find(&args.dataset)?;
    let mut toy_cfg = config.toy.unwrap_or_default();
    if let Some(s) = seed {
        toy_cfg.seed = s;
    }
    let (_, test) = registry::load(&entry, args.data_root.as_deref(), &toy_cfg)?;

    let mut proto = config.eval.clone().unwrap_or_default();
    if let Some(r) = args.runs {
        proto.runs = r;
    }
    if let Some(e) = args.epochs {
        proto.epochs = e;
    }
    if let Some(w) = args.width {
        proto.width = w;
    }
    if let Some(s) = seed {
        proto.seed_base = s;
    }

    let report = evaluate_synthetic(&syn, codec.as_ref(), &policy, &test, &proto)?;
    for (run, acc) in report.accuracies.iter().enumerate() {
        println!("run {run}: accuracy {:.4}", acc);
    }
    println!(
        "mean {:.4} +/- {:.4} over {} runs ({:.1}s)",
        report.mean,
        report.std,
        report.accuracies.len(),
        report.wall_time_s
    );
    let out = resolve_path(&args.out);
    write_eval_report_records(&out, &report)?;
    println!("wrote {}", out.display());
    Ok(())
}
