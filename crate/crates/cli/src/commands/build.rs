//! build-latents: dataset + codec + factor -> latent cache file.

use crate::config::FileConfig;
use crate::{registry, resolve_path};
use anyhow::{bail, Context, Result};
use clap::Args;
use latentdd_core::codec::{
    encode_dataset, train_toy_codec, IdentityCodec, LatentCodec, ResamplePolicy,
};
use latentdd_core::io::{read_cache_header, save_codec, write_cache};
use latentdd_core::resources::measure_phase;
use std::path::PathBuf;

#[derive(Args)]
pub struct BuildArgs {
    /// Registered dataset name.
    #[arg(long, default_value = "toy")]
    pub dataset: String,
    /// Root folder for image-folder datasets (train/<class>/, val/<class>/).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Codec: "identity" (pixel passthrough) or "toy" (trainable).
    #[arg(long, default_value = "toy")]
    pub codec: String,
    /// Weight file for the toy codec; trained and saved here when missing.
    #[arg(long)]
    pub codec_file: Option<PathBuf>,
    /// Native downsampling factor of the toy codec (2, 4, or 8).
    #[arg(long, default_value_t = 8)]
    pub factor: u32,
    /// Latent channels of the toy codec.
    #[arg(long, default_value_t = 4)]
    pub c_lat: usize,
    /// Integer upsampling applied to images before encoding.
    #[arg(long, default_value_t = 2)]
    pub pre_upsample: u32,
    /// Encoding batch size (per-item results do not depend on it).
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Output cache for the training split.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional output cache for the test split.
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// Overwrite an existing cache even if its fingerprint differs.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

pub fn run(args: BuildArgs, seed: Option<u64>, config: &FileConfig) -> Result<()> {
    let entry = registry::find(&args.dataset)?;
    let mut toy_cfg = config.toy.unwrap_or_default();
    if let Some(s) = seed {
        toy_cfg.seed = s;
    }
    let (train, test) = registry::load(&entry, args.data_root.as_deref(), &toy_cfg)?;
    println!(
        "dataset '{}': {} train / {} test items at {}x{}",
        entry.name,
        train.len(),
        test.len(),
        train.resolution().0,
        train.resolution().1
    );

    let (codec, policy): (Box<dyn LatentCodec>, ResamplePolicy) = match args.codec.as_str() {
        "identity" => (Box::new(IdentityCodec), ResamplePolicy::identity()),
        "toy" => {
            let mut codec_cfg = config.codec.clone().unwrap_or_default();
            if let Some(s) = seed {
                codec_cfg.seed = s;
            }
            let codec_path = args.codec_file.as_ref().map(|p| resolve_path(p));
            let codec = match &codec_path {
                Some(p) if p.exists() => {
                    let c = latentdd_core::io::load_codec(p)?;
                    println!(
                        "loaded codec {} (f={}, c_lat={}, val mse {:.5})",
                        p.display(),
                        c.factor,
                        c.c_lat,
                        c.validation_mse
                    );
                    c
                }
                _ => {
                    let (c, report) = measure_phase("train-codec", || {
                        train_toy_codec(&train, args.factor, args.c_lat, &codec_cfg)
                    });
                    let c = c?;
                    println!(
                        "trained codec in {:.1}s (val mse {:.5}, peak mem {} MB)",
                        report.wall_time_s,
                        c.validation_mse,
                        report.peak_main_memory_bytes / (1 << 20)
                    );
                    if let Some(p) = &codec_path {
                        save_codec(p, &c)?;
                        println!("saved codec weights to {}", p.display());
                    }
                    c
                }
            };
            (Box::new(codec), ResamplePolicy::upsample(args.pre_upsample))
        }
        other => bail!("unknown codec '{other}' (available: identity, toy)"),
    };

    let out = resolve_path(&args.out);
    if out.exists() && !args.force {
        let header = read_cache_header(&out)
            .with_context(|| format!("inspecting existing cache {}", out.display()))?;
        if header.codec_fingerprint != codec.fingerprint() {
            return Err(latentdd_core::Error::FingerprintMismatch {
                expected: codec.fingerprint(),
                found: header.codec_fingerprint,
            }
            .into());
        }
    }

    let (lat, report) = measure_phase("build-latents", || {
        encode_dataset(&train, codec.as_ref(), &policy, args.batch)
    });
    let lat = lat?;
    write_cache(&out, &lat)?;
    let bytes = std::fs::metadata(&out)?.len();
    println!(
        "wrote {}: {} items, latent {}x{}x{}, effective f={}, {:.2} MB, {:.1}s, peak mem {} MB",
        out.display(),
        lat.len(),
        lat.c_lat(),
        lat.spatial().0,
        lat.spatial().1,
        lat.effective_factor(),
        bytes as f64 / (1 << 20) as f64,
        report.wall_time_s,
        report.peak_main_memory_bytes / (1 << 20)
    );

    if let Some(test_out) = &args.test_out {
        let test_out = resolve_path(test_out);
        let lat_test = encode_dataset(&test, codec.as_ref(), &policy, args.batch)?;
        write_cache(&test_out, &lat_test)?;
        println!("wrote {} ({} items)", test_out.display(), lat_test.len());
    }
    Ok(())
}
