//! The pluggable autoencoder boundary: encode real datasets into latent
//! caches, decode synthetic latents into images, train a desk-scale codec,
//! and verify that the latent space preserves the dataset's distribution.

use crate::autodiff::Graph;
use crate::data::{RealImageDataset, SyntheticLatentSet};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::LatentDataset;
use ndarray::{Array4, ArrayD, ArrayView4, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Encoder/decoder pair with a fixed downsampling factor and latent
/// channel count.
pub trait LatentCodec {
    fn factor(&self) -> u32;
    fn c_lat(&self) -> usize;
    /// Resolution the codec was trained at (its preferred input size).
    fn native_resolution(&self) -> usize;
    /// Content hash of the codec weights.
    fn fingerprint(&self) -> String;
    fn encode(&self, images: ArrayView4<f32>) -> Array4<f32>;
    fn decode(&self, latents: ArrayView4<f32>) -> Array4<f32>;
}

/// Pass-through codec (f = 1, latents are the images). Always available
/// under the name "identity"; pixel-space runs go through it.
#[derive(Debug, Clone, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn factor(&self) -> u32 {
        1
    }
    fn c_lat(&self) -> usize {
        3
    }
    fn native_resolution(&self) -> usize {
        0 // any
    }
    fn fingerprint(&self) -> String {
        "identity".into()
    }
    fn encode(&self, images: ArrayView4<f32>) -> Array4<f32> {
        images.to_owned()
    }
    fn decode(&self, latents: ArrayView4<f32>) -> Array4<f32> {
        latents.to_owned()
    }
}

/// Integer resampling applied around the codec: images are upsampled by
/// `pre_upsample` before encoding and decoded images are downsampled by
/// `post_downsample`, shifting the effective downsampling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePolicy {
    pub pre_upsample: u32,
    pub post_downsample: u32,
}

impl ResamplePolicy {
    pub fn identity() -> Self {
        Self {
            pre_upsample: 1,
            post_downsample: 1,
        }
    }

    pub fn upsample(factor: u32) -> Self {
        Self {
            pre_upsample: factor,
            post_downsample: factor,
        }
    }

    pub fn validate(&self, codec_factor: u32) -> Result<()> {
        if self.pre_upsample != self.post_downsample {
            return Err(Error::InvalidArgument(
                "pre_upsample must equal post_downsample".into(),
            ));
        }
        if self.pre_upsample == 0 {
            return Err(Error::InvalidArgument("resample factor must be >= 1".into()));
        }
        if codec_factor % self.pre_upsample != 0 || codec_factor < self.pre_upsample {
            return Err(Error::InvalidArgument(format!(
                "effective factor {codec_factor}/{} is not a positive integer",
                self.pre_upsample
            )));
        }
        Ok(())
    }

    pub fn effective_factor(&self, codec_factor: u32) -> u32 {
        codec_factor / self.pre_upsample
    }
}

/// Nearest-neighbor integer upsampling of an image batch.
pub fn upsample_nearest(images: ArrayView4<f32>, k: u32) -> Array4<f32> {
    let k = k as usize;
    let (n, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((n, c, h * k, w * k));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h * k {
                for x in 0..w * k {
                    out[[ni, ci, y, x]] = images[[ni, ci, y / k, x / k]];
                }
            }
        }
    }
    out
}

/// Box-average integer downsampling of an image batch.
pub fn downsample_avg(images: ArrayView4<f32>, k: u32) -> Array4<f32> {
    let k = k as usize;
    let (n, c, h, w) = images.dim();
    assert!(h % k == 0 && w % k == 0, "downsample: indivisible size");
    let inv = 1.0 / (k * k) as f32;
    let mut out = Array4::<f32>::zeros((n, c, h / k, w / k));
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h / k {
                for x in 0..w / k {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += images[[ni, ci, y * k + dy, x * k + dx]];
                        }
                    }
                    out[[ni, ci, y, x]] = s * inv;
                }
            }
        }
    }
    out
}

/// Encode a pixel dataset into a latent cache.
///
/// Item order and labels are preserved, and per-item results do not depend
/// on `batch` (convolutions run item by item).
pub fn encode_dataset(
    real: &RealImageDataset,
    codec: &dyn LatentCodec,
    policy: &ResamplePolicy,
    batch: usize,
) -> Result<LatentDataset> {
    policy.validate(codec.factor())?;
    let (h, w) = real.resolution();
    let (uh, uw) = (
        h * policy.pre_upsample as usize,
        w * policy.pre_upsample as usize,
    );
    let f = codec.factor() as usize;
    if uh % f != 0 {
        return Err(Error::Shape {
            axis: "height",
            msg: format!("pre-upsampled height {uh} not divisible by factor {f}"),
        });
    }
    if uw % f != 0 {
        return Err(Error::Shape {
            axis: "width",
            msg: format!("pre-upsampled width {uw} not divisible by factor {f}"),
        });
    }
    let batch = batch.max(1);
    let count = real.len();
    let mut latents = Array4::<f32>::zeros((count, codec.c_lat(), uh / f, uw / f));
    let mut start = 0;
    while start < count {
        let end = (start + batch).min(count);
        let chunk = real.images.slice(ndarray::s![start..end, .., .., ..]);
        let pre = if policy.pre_upsample > 1 {
            encode_input(chunk, policy.pre_upsample)
        } else {
            chunk.to_owned()
        };
        let enc = codec.encode(pre.view());
        latents
            .slice_mut(ndarray::s![start..end, .., .., ..])
            .assign(&enc);
        start = end;
    }
    LatentDataset::new(
        latents,
        real.labels.clone(),
        real.num_classes,
        codec.factor(),
        policy.pre_upsample,
        codec.fingerprint(),
    )
}

fn encode_input(chunk: ArrayView4<f32>, pre: u32) -> Array4<f32> {
    upsample_nearest(chunk, pre)
}

/// Decode a synthetic latent set back to a pixel dataset at the original
/// resolution. Labels pass through untouched.
pub fn decode_set(
    syn: &SyntheticLatentSet,
    codec: &dyn LatentCodec,
    policy: &ResamplePolicy,
) -> Result<RealImageDataset> {
    policy.validate(codec.factor())?;
    let latents = syn.latents();
    if latents.shape()[1] != codec.c_lat() {
        return Err(Error::Shape {
            axis: "channels",
            msg: format!(
                "latent channels {} do not match codec c_lat {}",
                latents.shape()[1],
                codec.c_lat()
            ),
        });
    }
    let decoded = codec.decode(latents.view());
    let images = if policy.post_downsample > 1 {
        downsample_avg(decoded.view(), policy.post_downsample)
    } else {
        decoded
    };
    RealImageDataset::new(images, syn.labels().to_vec(), syn.num_classes)
}

/// Pearson correlation between the pairwise-distance structure of `n`
/// sampled items in pixel space and in latent space.
pub fn distribution_fidelity(
    real: &RealImageDataset,
    lat: &LatentDataset,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n < 3 {
        return Err(Error::InvalidArgument("need at least 3 samples".into()));
    }
    if real.len() != lat.len() {
        return Err(Error::InvalidArgument(
            "pixel and latent sets have different item counts".into(),
        ));
    }
    if n > real.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} items from {}",
            real.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..real.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(n);

    let dp = distance_upper_triangle(&real.images, &indices);
    let dl = distance_upper_triangle(&lat.latents, &indices);
    pearson(&dp, &dl)
}

fn distance_upper_triangle(items: &Array4<f32>, indices: &[usize]) -> Vec<f64> {
    let n = indices.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = items.index_axis(Axis(0), indices[i]);
            let b = items.index_axis(Axis(0), indices[j]);
            let d: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            out.push(d);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

// ---------------------------------------------------------------------------
// Trainable convolutional codec
// ---------------------------------------------------------------------------

/// Symmetric convolutional autoencoder: one stride-2 stage per factor of
/// two, MSE reconstruction loss only.
#[derive(Debug, Clone)]
pub struct ConvCodec {
    pub factor: u32,
    pub c_lat: usize,
    pub widths: Vec<usize>,
    pub native_resolution: usize,
    /// Validation reconstruction MSE recorded at the end of training.
    pub validation_mse: f32,
    pub(crate) enc_params: Vec<ArrayD<f32>>,
    pub(crate) dec_params: Vec<ArrayD<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub widths: Vec<usize>,
    pub val_fraction: f32,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 3e-3,
            widths: vec![24, 48, 64],
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ConvCodec {
    fn stages(factor: u32) -> Result<usize> {
        match factor {
            2 => Ok(1),
            4 => Ok(2),
            8 => Ok(3),
            other => Err(Error::InvalidArgument(format!(
                "codec factor must be one of 2, 4, 8 (got {other})"
            ))),
        }
    }

    /// Random-initialized codec (useful for shape tests; train before use).
    pub fn init(
        factor: u32,
        c_lat: usize,
        widths: &[usize],
        native_resolution: usize,
        seed: u64,
    ) -> Result<Self> {
        let stages = Self::stages(factor)?;
        if c_lat >= 3 * (factor * factor) as usize {
            return Err(Error::InvalidArgument(format!(
                "c_lat {c_lat} >= 3*f^2 = {}: no compression",
                3 * factor * factor
            )));
        }
        let widths: Vec<usize> = (0..stages)
            .map(|i| widths[i.min(widths.len() - 1)])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_params = Vec::new();
        let mut cin = 3;
        for &wd in &widths {
            push_conv(&mut enc_params, wd, cin, &mut rng);
            cin = wd;
        }
        push_conv(&mut enc_params, c_lat, cin, &mut rng);

        let mut dec_params = Vec::new();
        let mut prev = c_lat;
        for i in (0..widths.len()).rev() {
            push_conv(&mut dec_params, widths[i], prev, &mut rng);
            prev = widths[i];
        }
        push_conv(&mut dec_params, 3, prev, &mut rng);

        Ok(Self {
            factor,
            c_lat,
            widths,
            native_resolution,
            validation_mse: f32::NAN,
            enc_params,
            dec_params,
        })
    }

    fn all_params(&self) -> Vec<ArrayD<f32>> {
        self.enc_params
            .iter()
            .chain(self.dec_params.iter())
            .cloned()
            .collect()
    }

    fn set_params(&mut self, params: &[ArrayD<f32>]) {
        let ne = self.enc_params.len();
        self.enc_params = params[..ne].to_vec();
        self.dec_params = params[ne..].to_vec();
    }

    pub(crate) fn from_raw_parts(
        factor: u32,
        c_lat: usize,
        widths: Vec<usize>,
        native_resolution: usize,
        validation_mse: f32,
        enc_params: Vec<ArrayD<f32>>,
        dec_params: Vec<ArrayD<f32>>,
    ) -> Self {
        Self {
            factor,
            c_lat,
            widths,
            native_resolution,
            validation_mse,
            enc_params,
            dec_params,
        }
    }

    pub(crate) fn raw_params(&self) -> (&[ArrayD<f32>], &[ArrayD<f32>]) {
        (&self.enc_params, &self.dec_params)
    }

    fn encode_graph(
        &self,
        g: &Graph,
        params: &[crate::autodiff::Var],
        x: crate::autodiff::Var,
    ) -> crate::autodiff::Var {
        let mut cur = x;
        let mut pi = 0;
        for _ in 0..self.widths.len() {
            cur = conv_block(g, cur, params[pi], params[pi + 1], true);
            cur = g.avg_pool2(cur);
            pi += 2;
        }
        conv_block(g, cur, params[pi], params[pi + 1], false)
    }

    fn decode_graph(
        &self,
        g: &Graph,
        params: &[crate::autodiff::Var],
        z: crate::autodiff::Var,
    ) -> crate::autodiff::Var {
        let mut cur = z;
        let mut pi = 0;
        for _ in 0..self.widths.len() {
            cur = conv_block(g, cur, params[pi], params[pi + 1], true);
            cur = g.upsample2(cur);
            pi += 2;
        }
        conv_block(g, cur, params[pi], params[pi + 1], false)
    }

    fn run_batch(&self, input: ArrayView4<f32>, encode: bool) -> Array4<f32> {
        let g = Graph::new();
        let x = g.constant(input.to_owned().into_dyn());
        let params: Vec<_> = if encode {
            self.enc_params.iter().map(|p| g.constant(p.clone())).collect()
        } else {
            self.dec_params.iter().map(|p| g.constant(p.clone())).collect()
        };
        let out = if encode {
            self.encode_graph(&g, &params, x)
        } else {
            self.decode_graph(&g, &params, x)
        };
        g.value(out)
            .as_ref()
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("codec output rank 4")
    }
}

fn push_conv(params: &mut Vec<ArrayD<f32>>, cout: usize, cin: usize, rng: &mut ChaCha8Rng) {
    let fan_in = (cin * 9) as f32;
    let bound = 1.0 / fan_in.sqrt();
    params.push(ArrayD::from_shape_fn(
        IxDyn(&[cout, cin, 3, 3]),
        |_| rng.gen_range(-bound..bound),
    ));
    params.push(ArrayD::from_shape_fn(IxDyn(&[cout]), |_| {
        rng.gen_range(-bound..bound)
    }));
}

fn conv_block(
    g: &Graph,
    x: crate::autodiff::Var,
    w: crate::autodiff::Var,
    b: crate::autodiff::Var,
    relu: bool,
) -> crate::autodiff::Var {
    let y = g.conv2d(x, w, 1);
    let sh = g.shape(y);
    let y = g.add(y, g.bcast_c(b, sh[0], sh[2], sh[3]));
    if relu {
        g.relu(y)
    } else {
        y
    }
}

impl LatentCodec for ConvCodec {
    fn factor(&self) -> u32 {
        self.factor
    }
    fn c_lat(&self) -> usize {
        self.c_lat
    }
    fn native_resolution(&self) -> usize {
        self.native_resolution
    }
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.factor.to_le_bytes());
        hasher.update((self.c_lat as u64).to_le_bytes());
        for &w in &self.widths {
            hasher.update((w as u64).to_le_bytes());
        }
        for p in self.enc_params.iter().chain(self.dec_params.iter()) {
            for v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }
    fn encode(&self, images: ArrayView4<f32>) -> Array4<f32> {
        self.run_batch(images, true)
    }
    fn decode(&self, latents: ArrayView4<f32>) -> Array4<f32> {
        self.run_batch(latents, false)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Train a desk-scale codec on `real` with an MSE reconstruction loss.
///
/// The training/validation split is disjoint; the recorded validation MSE
/// serves as the codec's quality bound for later round-trip checks.
pub fn train_toy_codec(
    real: &RealImageDataset,
    factor: u32,
    c_lat: usize,
    cfg: &CodecTrainConfig,
) -> Result<ConvCodec> {
    let (h, w) = real.resolution();
    let mut codec = ConvCodec::init(factor, c_lat, &cfg.widths, h.max(w), cfg.seed)?;
    if h % factor as usize != 0 || w % factor as usize != 0 {
        return Err(Error::Shape {
            axis: "height",
            msg: format!("resolution {h}x{w} not divisible by factor {factor}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..real.len()).collect();
    order.shuffle(&mut rng);
    let val_count = ((real.len() as f32 * cfg.val_fraction) as usize).max(1);
    let (val_idx, train_idx) = order.split_at(val_count);

    let mut params = codec.all_params();
    let ne = codec.enc_params.len();
    let mut opt = Adam::new(cfg.lr);
    let mut last_finite = f32::NAN;
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut epoch_order = train_idx.to_vec();
        epoch_order.shuffle(&mut rng);
        for chunk in epoch_order.chunks(cfg.batch_size) {
            let batch = gather_items(&real.images, chunk);
            let g = Graph::new();
            let vars: Vec<_> = params.iter().map(|p| g.constant(p.clone())).collect();
            let x = g.constant(batch.into_dyn());
            let z = codec.encode_graph(&g, &vars[..ne], x);
            let y = codec.decode_graph(&g, &vars[ne..], z);
            let loss = g.mean_all(g.square(g.sub(y, x)));
            let lv = g.scalar_value(loss);
            if !lv.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    last_loss: last_finite,
                });
            }
            last_finite = lv;
            let grads = g.grad_arrays(loss, &vars);
            opt.step(&mut params, &grads);
            step += 1;
        }
    }
    codec.set_params(&params);

    // Validation MSE on the held-out split.
    let val = gather_items(&real.images, val_idx);
    let recon = codec.decode(codec.encode(val.view()).view());
    let mse = (&recon - &val).mapv(|v| v * v).mean().unwrap_or(f32::NAN);
    codec.validation_mse = mse;
    Ok(codec)
}

pub(crate) fn gather_items(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}
