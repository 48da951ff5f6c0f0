//! Versioned binary file formats and line-oriented record files.
//!
//! All multi-byte fields are little-endian. Layouts:
//!
//! Latent cache (`LDDC`): magic, version u32, kind u8 (0 real / 1
//! synthetic), factor u32, pre_upsample u32, c_lat u32, h u32, w u32,
//! count u64, num_classes u32, codec fingerprint (len-prefixed utf8),
//! per-channel mean and std (c_lat f32 each), then for synthetic sets the
//! budget (ipc u64, effective factor u32, lpc u64), seed u64, algorithm u8,
//! iterations u64; labels block (count u32 LE), data block (count *
//! c_lat * h * w f32 LE, item-major).
//!
//! Trajectory buffer (`LDDT`): magic, version u32, network spec (six
//! u32), spec digest (len-prefixed), dataset fingerprint (len-prefixed),
//! num_experts u32, epochs u32, param_count u64, skipped u32, then
//! per-expert contiguous f32 snapshot blocks ((epochs + 1) * param_count
//! each).
//!
//! Codec weights (`LDDW`): magic, version u32, factor u32, c_lat u32,
//! native resolution u32, validation MSE f32, stage widths, then encoder
//! and decoder tensor lists (rank u32, dims u64*, data f32*).

use crate::codec::ConvCodec;
use crate::data::{Algorithm, BudgetSpec, LatentDataset, SyntheticLatentSet, SyntheticMeta};
use crate::distill::{LossTrace, TraceRecord, TrajectoryBuffer};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::networks::ConvNetSpec;
use ndarray::{Array1, Array4, ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const CACHE_MAGIC: &[u8; 4] = b"LDDC";
const BUFFER_MAGIC: &[u8; 4] = b"LDDT";
const CODEC_MAGIC: &[u8; 4] = b"LDDW";
const CACHE_VERSION: u32 = 1;
const BUFFER_VERSION: u32 = 1;
const CODEC_VERSION: u32 = 1;

fn ferr(path: &Path, msg: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

// ---- little-endian primitives ----

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}
fn r_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}
fn r_str(r: &mut impl Read) -> Result<String> {
    let n = r_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::InvalidArgument("non-utf8 string field".into()))
}

fn w_f32_slice(w: &mut impl Write, data: &[f32]) -> Result<()> {
    // Buffered byte conversion in chunks keeps writes fast without holding
    // a full copy.
    let mut buf = Vec::with_capacity(4 * 4096);
    for chunk in data.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn r_f32_vec(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; 4 * n];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut one = [0u8; 1];
    match r.read(&mut one)? {
        0 => Ok(()),
        _ => Err(ferr(path, "trailing bytes after declared blocks")),
    }
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], path: &Path) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(ferr(
            path,
            format!("bad magic {:?}, expected {:?}", got, magic),
        ));
    }
    Ok(())
}

// ---- latent cache ----

pub fn write_cache(path: &Path, lat: &LatentDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w_u32(&mut w, CACHE_VERSION)?;
    w.write_all(&[0u8])?; // kind: real cache
    let sh = lat.latents.shape();
    w_u32(&mut w, lat.factor)?;
    w_u32(&mut w, lat.pre_upsample)?;
    w_u32(&mut w, sh[1] as u32)?;
    w_u32(&mut w, sh[2] as u32)?;
    w_u32(&mut w, sh[3] as u32)?;
    w_u64(&mut w, sh[0] as u64)?;
    w_u32(&mut w, lat.num_classes as u32)?;
    w_str(&mut w, &lat.codec_fingerprint)?;
    for &v in &lat.channel_mean {
        w_f32(&mut w, v)?;
    }
    for &v in &lat.channel_std {
        w_f32(&mut w, v)?;
    }
    for &l in &lat.labels {
        w_u32(&mut w, l)?;
    }
    w_f32_slice(&mut w, lat.latents.as_slice().expect("contiguous latents"))?;
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<LatentDataset> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CACHE_MAGIC, path)?;
    let version = r_u32(&mut r)?;
    if version > CACHE_VERSION {
        return Err(ferr(path, format!("unsupported cache version {version}")));
    }
    let kind = r_u8(&mut r)?;
    if kind != 0 {
        return Err(ferr(path, "file holds a synthetic set, not a real cache"));
    }
    let (lat, _, _) = read_cache_body(&mut r, path)?;
    expect_eof(&mut r, path)?;
    Ok(lat)
}

/// Read only the header fields of a cache (any kind), for fingerprint
/// checks before expensive work.
pub fn read_cache_header(path: &Path) -> Result<CacheHeader> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CACHE_MAGIC, path)?;
    let version = r_u32(&mut r)?;
    if version > CACHE_VERSION {
        return Err(ferr(path, format!("unsupported cache version {version}")));
    }
    let kind = r_u8(&mut r)?;
    let factor = r_u32(&mut r)?;
    let pre_upsample = r_u32(&mut r)?;
    let c_lat = r_u32(&mut r)? as usize;
    let h = r_u32(&mut r)? as usize;
    let w = r_u32(&mut r)? as usize;
    let count = r_u64(&mut r)? as usize;
    let num_classes = r_u32(&mut r)? as usize;
    let codec_fingerprint = r_str(&mut r)?;
    Ok(CacheHeader {
        kind,
        factor,
        pre_upsample,
        c_lat,
        h,
        w,
        count,
        num_classes,
        codec_fingerprint,
    })
}

#[derive(Debug, Clone)]
pub struct CacheHeader {
    pub kind: u8,
    pub factor: u32,
    pub pre_upsample: u32,
    pub c_lat: usize,
    pub h: usize,
    pub w: usize,
    pub count: usize,
    pub num_classes: usize,
    pub codec_fingerprint: String,
}

#[allow(clippy::type_complexity)]
fn read_cache_body(
    r: &mut impl Read,
    path: &Path,
) -> Result<(LatentDataset, Vec<f32>, Vec<f32>)> {
    let factor = r_u32(r)?;
    let pre_upsample = r_u32(r)?;
    let c_lat = r_u32(r)? as usize;
    let h = r_u32(r)? as usize;
    let w = r_u32(r)? as usize;
    let count = r_u64(r)? as usize;
    let num_classes = r_u32(r)? as usize;
    let fingerprint = r_str(r)?;
    let mean = r_f32_vec(r, c_lat)?;
    let std = r_f32_vec(r, c_lat)?;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r_u32(r)?);
    }
    let data = r_f32_vec(r, count * c_lat * h * w)
        .map_err(|_| ferr(path, "data block shorter than declared count"))?;
    let latents = Array4::from_shape_vec((count, c_lat, h, w), data)
        .map_err(|e| ferr(path, format!("shape: {e}")))?;
    let lat = LatentDataset::new(latents, labels, num_classes, factor, pre_upsample, fingerprint)?;
    Ok((lat, mean, std))
}

/// Provenance a synthetic-set file carries so it can be decoded later.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFileMeta {
    pub factor: u32,
    pub pre_upsample: u32,
    pub codec_fingerprint: String,
}

pub fn write_synthetic_set(
    path: &Path,
    syn: &SyntheticLatentSet,
    meta: &SyntheticFileMeta,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w_u32(&mut w, CACHE_VERSION)?;
    w.write_all(&[1u8])?; // kind: synthetic
    let sh = syn.latents().shape();
    w_u32(&mut w, meta.factor)?;
    w_u32(&mut w, meta.pre_upsample)?;
    w_u32(&mut w, sh[1] as u32)?;
    w_u32(&mut w, sh[2] as u32)?;
    w_u32(&mut w, sh[3] as u32)?;
    w_u64(&mut w, sh[0] as u64)?;
    w_u32(&mut w, syn.num_classes as u32)?;
    w_str(&mut w, &meta.codec_fingerprint)?;
    let (mean, std) = crate::data::channel_stats(syn.latents());
    for &v in &mean {
        w_f32(&mut w, v)?;
    }
    for &v in &std {
        w_f32(&mut w, v)?;
    }
    // Budget metadata.
    w_u64(&mut w, syn.budget.ipc as u64)?;
    w_u32(&mut w, syn.budget.factor)?;
    w_u64(&mut w, syn.budget.c_lat as u64)?;
    w_u64(&mut w, syn.budget.lpc as u64)?;
    w_u64(&mut w, syn.meta.seed)?;
    let algo = match syn.meta.algorithm {
        Algorithm::Init => 0u8,
        Algorithm::Dc => 1,
        Algorithm::Dm => 2,
        Algorithm::Mtt => 3,
    };
    w.write_all(&[algo])?;
    w_u64(&mut w, syn.meta.iterations as u64)?;
    for &l in syn.labels() {
        w_u32(&mut w, l)?;
    }
    w_f32_slice(&mut w, syn.latents().as_slice().expect("contiguous latents"))?;
    w.flush()?;
    Ok(())
}

pub fn read_synthetic_set(path: &Path) -> Result<(SyntheticLatentSet, SyntheticFileMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CACHE_MAGIC, path)?;
    let version = r_u32(&mut r)?;
    if version > CACHE_VERSION {
        return Err(ferr(path, format!("unsupported cache version {version}")));
    }
    let kind = r_u8(&mut r)?;
    if kind != 1 {
        return Err(ferr(path, "file holds a real cache, not a synthetic set"));
    }
    let factor = r_u32(&mut r)?;
    let pre_upsample = r_u32(&mut r)?;
    let c_lat = r_u32(&mut r)? as usize;
    let h = r_u32(&mut r)? as usize;
    let w = r_u32(&mut r)? as usize;
    let count = r_u64(&mut r)? as usize;
    let num_classes = r_u32(&mut r)? as usize;
    let codec_fingerprint = r_str(&mut r)?;
    let _mean = r_f32_vec(&mut r, c_lat)?;
    let _std = r_f32_vec(&mut r, c_lat)?;
    let ipc = r_u64(&mut r)? as usize;
    let b_factor = r_u32(&mut r)?;
    let b_c_lat = r_u64(&mut r)? as usize;
    let lpc = r_u64(&mut r)? as usize;
    let seed = r_u64(&mut r)?;
    let algorithm = match r_u8(&mut r)? {
        0 => Algorithm::Init,
        1 => Algorithm::Dc,
        2 => Algorithm::Dm,
        3 => Algorithm::Mtt,
        other => return Err(ferr(path, format!("unknown algorithm tag {other}"))),
    };
    let iterations = r_u64(&mut r)? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r_u32(&mut r)?);
    }
    let data = r_f32_vec(&mut r, count * c_lat * h * w)
        .map_err(|_| ferr(path, "data block shorter than declared count"))?;
    expect_eof(&mut r, path)?;
    let latents = Array4::from_shape_vec((count, c_lat, h, w), data)
        .map_err(|e| ferr(path, format!("shape: {e}")))?;
    let budget = BudgetSpec {
        ipc,
        factor: b_factor,
        c_lat: b_c_lat,
        img_channels: 3,
        lpc,
    };
    let syn = SyntheticLatentSet::from_parts(
        latents,
        labels,
        budget,
        num_classes,
        SyntheticMeta {
            seed,
            algorithm,
            iterations,
        },
    )?;
    Ok((
        syn,
        SyntheticFileMeta {
            factor,
            pre_upsample,
            codec_fingerprint,
        },
    ))
}

// ---- trajectory buffer ----

fn spec_digest(spec: &ConvNetSpec) -> String {
    let mut hasher = Sha256::new();
    for v in [
        spec.depth as u32,
        spec.in_channels as u32,
        spec.num_classes as u32,
        spec.input_hw.0 as u32,
        spec.input_hw.1 as u32,
        spec.width as u32,
    ] {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_trajectory_buffer(path: &Path, buf: &TrajectoryBuffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BUFFER_MAGIC)?;
    w_u32(&mut w, BUFFER_VERSION)?;
    for v in [
        buf.spec.depth as u32,
        buf.spec.in_channels as u32,
        buf.spec.num_classes as u32,
        buf.spec.input_hw.0 as u32,
        buf.spec.input_hw.1 as u32,
        buf.spec.width as u32,
    ] {
        w_u32(&mut w, v)?;
    }
    w_str(&mut w, &spec_digest(&buf.spec))?;
    w_str(&mut w, &buf.dataset_fingerprint)?;
    w_u32(&mut w, buf.experts.len() as u32)?;
    w_u32(&mut w, buf.epochs_per_expert as u32)?;
    w_u64(&mut w, buf.spec.param_count() as u64)?;
    w_u32(&mut w, buf.skipped as u32)?;
    for expert in &buf.experts {
        for snap in expert {
            w_f32_slice(&mut w, snap.as_slice().expect("contiguous snapshot"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a buffer; when `expected_dataset_fingerprint` is given, reject a
/// buffer built from a different cache.
pub fn read_trajectory_buffer(
    path: &Path,
    expected_dataset_fingerprint: Option<&str>,
) -> Result<TrajectoryBuffer> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, BUFFER_MAGIC, path)?;
    let version = r_u32(&mut r)?;
    if version > BUFFER_VERSION {
        return Err(ferr(path, format!("unsupported buffer version {version}")));
    }
    let depth = r_u32(&mut r)? as usize;
    let in_channels = r_u32(&mut r)? as usize;
    let num_classes = r_u32(&mut r)? as usize;
    let h = r_u32(&mut r)? as usize;
    let w = r_u32(&mut r)? as usize;
    let width = r_u32(&mut r)? as usize;
    let spec = ConvNetSpec::new(depth, in_channels, num_classes, (h, w), width)?;
    let digest = r_str(&mut r)?;
    if digest != spec_digest(&spec) {
        return Err(ferr(path, "network spec digest mismatch"));
    }
    let dataset_fingerprint = r_str(&mut r)?;
    if let Some(expected) = expected_dataset_fingerprint {
        if dataset_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: dataset_fingerprint,
            });
        }
    }
    let num_experts = r_u32(&mut r)? as usize;
    let epochs = r_u32(&mut r)? as usize;
    let param_count = r_u64(&mut r)? as usize;
    let skipped = r_u32(&mut r)? as usize;
    if param_count != spec.param_count() {
        return Err(ferr(path, "parameter count does not match network spec"));
    }
    let mut experts = Vec::with_capacity(num_experts);
    for _ in 0..num_experts {
        let mut traj = Vec::with_capacity(epochs + 1);
        for _ in 0..=epochs {
            let snap = r_f32_vec(&mut r, param_count)
                .map_err(|_| ferr(path, "snapshot block shorter than declared"))?;
            traj.push(Array1::from_vec(snap));
        }
        experts.push(traj);
    }
    expect_eof(&mut r, path)?;
    Ok(TrajectoryBuffer {
        spec,
        dataset_fingerprint,
        epochs_per_expert: epochs,
        experts,
        skipped,
    })
}

// ---- codec weights ----

pub fn save_codec(path: &Path, codec: &ConvCodec) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CODEC_MAGIC)?;
    w_u32(&mut w, CODEC_VERSION)?;
    w_u32(&mut w, codec.factor)?;
    w_u32(&mut w, codec.c_lat as u32)?;
    w_u32(&mut w, codec.native_resolution as u32)?;
    w_f32(&mut w, codec.validation_mse)?;
    w_u32(&mut w, codec.widths.len() as u32)?;
    for &wd in &codec.widths {
        w_u32(&mut w, wd as u32)?;
    }
    let (enc, dec) = codec.raw_params();
    for group in [enc, dec] {
        w_u32(&mut w, group.len() as u32)?;
        for p in group {
            w_u32(&mut w, p.ndim() as u32)?;
            for &d in p.shape() {
                w_u64(&mut w, d as u64)?;
            }
            w_f32_slice(&mut w, p.as_slice().expect("contiguous param"))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<ConvCodec> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, CODEC_MAGIC, path)?;
    let version = r_u32(&mut r)?;
    if version > CODEC_VERSION {
        return Err(ferr(path, format!("unsupported codec version {version}")));
    }
    let factor = r_u32(&mut r)?;
    let c_lat = r_u32(&mut r)? as usize;
    let native = r_u32(&mut r)? as usize;
    let validation_mse = r_f32(&mut r)?;
    let n_widths = r_u32(&mut r)? as usize;
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r_u32(&mut r)? as usize);
    }
    let mut groups: Vec<Vec<ArrayD<f32>>> = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = r_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r_u64(&mut r)? as usize);
            }
            let n: usize = dims.iter().product();
            let data = r_f32_vec(&mut r, n)?;
            params.push(
                ArrayD::from_shape_vec(IxDyn(&dims), data)
                    .map_err(|e| ferr(path, format!("param shape: {e}")))?,
            );
        }
        groups.push(params);
    }
    expect_eof(&mut r, path)?;
    let dec = groups.pop().expect("decoder params");
    let enc = groups.pop().expect("encoder params");
    Ok(ConvCodec::from_raw_parts(
        factor,
        c_lat,
        widths,
        native,
        validation_mse,
        enc,
        dec,
    ))
}

// ---- line-oriented records ----

pub fn write_trace_records(path: &Path, trace: &LossTrace) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in trace {
        serde_json::to_writer(&mut w, record)
            .map_err(|e| ferr(path, format!("serialize: {e}")))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_records(path: &Path) -> Result<LossTrace> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord =
            serde_json::from_str(&line).map_err(|e| ferr(path, format!("parse: {e}")))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_eval_report_records(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (run, acc) in report.accuracies.iter().enumerate() {
        writeln!(w, "{}", serde_json::json!({ "run": run, "accuracy": acc }))?;
    }
    serde_json::to_writer(&mut w, &serde_json::json!({ "summary": report }))
        .map_err(|e| ferr(path, format!("serialize: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_eval_report_records(path: &Path) -> Result<EvalReport> {
    let r = BufReader::new(File::open(path)?);
    for line in r.lines() {
        let line = line?;
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) {
            if let Some(summary) = v.get("summary") {
                return serde_json::from_value(summary.clone())
                    .map_err(|e| ferr(path, format!("summary parse: {e}")));
            }
        }
    }
    Err(ferr(path, "record file has no summary line"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::init_synthetic;
    use crate::distill::{buffer_trajectories, ExpertTrainConfig};
    use crate::toyset::{generate_toy, ToyConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Keep the tempdir alive by leaking; tests are short-lived.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    fn sample_cache() -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let latents =
            Array4::from_shape_fn((10, 2, 4, 4), |_| rng.gen_range(-2.0f32..2.0));
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        LatentDataset::new(latents, labels, 2, 4, 2, "fp-test".into()).unwrap()
    }

    #[test]
    fn cache_roundtrip_bitwise() {
        let lat = sample_cache();
        let path = tmp("cache.lddc");
        write_cache(&path, &lat).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.latents, lat.latents);
        assert_eq!(back.labels, lat.labels);
        assert_eq!(back.factor, 4);
        assert_eq!(back.pre_upsample, 2);
        assert_eq!(back.codec_fingerprint, "fp-test");
        assert_eq!(back.channel_mean, lat.channel_mean);
    }

    #[test]
    fn truncated_cache_rejected() {
        let lat = sample_cache();
        let path = tmp("trunc.lddc");
        write_cache(&path, &lat).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_cache(&path).is_err());
        // Trailing garbage is also rejected.
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(
            read_cache(&path),
            Err(Error::FileFormat { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("bad.lddc");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_cache(&path), Err(Error::FileFormat { .. })));
    }

    #[test]
    fn synthetic_roundtrip_with_budget() {
        let lat = sample_cache();
        let budget = BudgetSpec::new(1, 2, 2).unwrap(); // lpc = 6
        let syn = init_synthetic(&lat, &budget, 42).unwrap();
        let meta = SyntheticFileMeta {
            factor: 4,
            pre_upsample: 2,
            codec_fingerprint: "fp-test".into(),
        };
        let path = tmp("syn.lddc");
        write_synthetic_set(&path, &syn, &meta).unwrap();
        let (back, back_meta) = read_synthetic_set(&path).unwrap();
        assert_eq!(back.latents(), syn.latents());
        assert_eq!(back.labels(), syn.labels());
        assert_eq!(back.budget, syn.budget);
        assert_eq!(back.meta, syn.meta);
        assert_eq!(back_meta, meta);
        // Kind mismatch is caught both ways.
        assert!(read_cache(&path).is_err());
    }

    #[test]
    fn buffer_roundtrip_and_fingerprint_check() {
        let (train, _) = generate_toy(&ToyConfig {
            train_per_class: 4,
            test_per_class: 1,
            ..Default::default()
        });
        let lat = crate::codec::encode_dataset(
            &train,
            &crate::codec::IdentityCodec,
            &crate::codec::ResamplePolicy::identity(),
            16,
        )
        .unwrap();
        let spec = ConvNetSpec::new(2, 3, 10, (32, 32), 4).unwrap();
        let buf = buffer_trajectories(
            &lat,
            &spec,
            2,
            2,
            &ExpertTrainConfig {
                batch_size: 16,
                ..Default::default()
            },
        )
        .unwrap();
        let path = tmp("buf.lddt");
        write_trajectory_buffer(&path, &buf).unwrap();
        let back = read_trajectory_buffer(&path, Some(&lat.content_fingerprint())).unwrap();
        assert_eq!(back.experts, buf.experts);
        assert_eq!(back.spec, spec);
        assert_eq!(back.epochs_per_expert, 2);
        assert!(matches!(
            read_trajectory_buffer(&path, Some("wrong")),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn codec_roundtrip_preserves_fingerprint() {
        use crate::codec::LatentCodec;
        let codec = ConvCodec::init(4, 4, &[6, 8], 32, 9).unwrap();
        let path = tmp("codec.lddw");
        save_codec(&path, &codec).unwrap();
        let back = load_codec(&path).unwrap();
        assert_eq!(back.fingerprint(), codec.fingerprint());
        assert_eq!(back.factor, 4);
        assert_eq!(back.widths, codec.widths);
    }

    #[test]
    fn trace_and_report_records_roundtrip() {
        let trace: LossTrace = (0..5)
            .map(|i| TraceRecord {
                iteration: i,
                outer: i % 2,
                loss: i as f32 * 0.5,
                model_lr: if i % 2 == 0 { Some(0.01) } else { None },
            })
            .collect();
        let path = tmp("trace.jsonl");
        write_trace_records(&path, &trace).unwrap();
        assert_eq!(read_trace_records(&path).unwrap(), trace);

        let report = EvalReport {
            accuracies: vec![0.5, 0.6, 0.7],
            mean: 0.6,
            std: 0.0816,
            protocol: crate::eval::EvalProtocol::default(),
            space: crate::networks::Space::Pixel,
            depth: 3,
            wall_time_s: 1.25,
        };
        let rpath = tmp("report.jsonl");
        write_eval_report_records(&rpath, &report).unwrap();
        let back = read_eval_report_records(&rpath).unwrap();
        assert_eq!(back.accuracies, report.accuracies);
        assert_eq!(back.mean, report.mean);
        assert_eq!(back.depth, 3);
        // One line per run plus the summary.
        let lines = std::fs::read_to_string(&rpath).unwrap();
        assert_eq!(lines.lines().count(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn cache_roundtrip_random(
            count in 2usize..6,
            c in 1usize..3,
            hw in 2usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latents = Array4::from_shape_fn((count * 2, c, hw, hw), |_| {
                rng.gen_range(-10.0f32..10.0)
            });
            let labels: Vec<u32> = (0..count * 2).map(|i| (i % 2) as u32).collect();
            let lat = LatentDataset::new(latents, labels, 2, 8, 1, "p".into()).unwrap();
            let path = tmp("prop.lddc");
            write_cache(&path, &lat).unwrap();
            let back = read_cache(&path).unwrap();
            prop_assert_eq!(back.latents, lat.latents);
            prop_assert_eq!(back.labels, lat.labels);
        }
    }
}
