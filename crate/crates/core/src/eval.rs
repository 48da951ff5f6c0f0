//! Pixel-space evaluation harness: decode, augment, train classifiers, and
//! score distilled sets; also the full-set baselines.

use crate::augment::{dsa_pixel, DsaOp};
use crate::autodiff::Graph;
use crate::codec::{decode_set, LatentCodec, ResamplePolicy};
use crate::data::{LatentDataset, RealImageDataset, SyntheticLatentSet};
use crate::error::{Error, Result};
use crate::networks::{build_convnet, depth_for_resolution, forward, ConvNetSpec, InitDistribution, InitScheme, Space};
use crate::optim::Sgd;
use ndarray::{Array4, Axis};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    /// Independent evaluation repetitions; run r uses seed_base + r.
    pub runs: usize,
    pub epochs: usize,
    /// Initial learning rate, cosine-decayed to zero over training.
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Classifier width (channels per block).
    pub width: usize,
    pub augment: Vec<DsaOp>,
    pub cutmix_prob: f32,
    pub seed_base: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            runs: 5,
            epochs: 300,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            width: 128,
            augment: vec![
                DsaOp::Color,
                DsaOp::Crop,
                DsaOp::Flip,
                DsaOp::Scale,
                DsaOp::Rotate,
                DsaOp::Cutmix,
            ],
            cutmix_prob: 0.5,
            seed_base: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidArgument("runs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f32>,
    pub mean: f32,
    pub std: f32,
    pub protocol: EvalProtocol,
    /// Space and classifier depth actually used.
    pub space: Space,
    pub depth: usize,
    pub wall_time_s: f64,
}

impl EvalReport {
    fn from_accuracies(
        accuracies: Vec<f32>,
        protocol: EvalProtocol,
        space: Space,
        depth: usize,
        wall_time_s: f64,
    ) -> Self {
        let n = accuracies.len() as f32;
        let mean = accuracies.iter().sum::<f32>() / n;
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / n;
        Self {
            accuracies,
            mean,
            std: var.sqrt(),
            protocol,
            space,
            depth,
            wall_time_s,
        }
    }
}

/// Decode a synthetic set once, then train and score `proto.runs` freshly
/// initialized pixel-space classifiers on it with DSA augmentation.
pub fn evaluate_synthetic(
    syn: &SyntheticLatentSet,
    codec: &dyn LatentCodec,
    policy: &ResamplePolicy,
    test: &RealImageDataset,
    proto: &EvalProtocol,
) -> Result<EvalReport> {
    proto.validate()?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let started = Instant::now();
    let decoded = decode_set(syn, codec, policy)?;
    let depth = depth_for_resolution(decoded.resolution().0, Space::Pixel, 1)?;
    let spec = ConvNetSpec::new(
        depth,
        decoded.channels(),
        decoded.num_classes,
        decoded.resolution(),
        proto.width,
    )?;
    let mut accuracies = Vec::with_capacity(proto.runs);
    for run in 0..proto.runs {
        let acc = train_classifier(
            &decoded.images,
            &decoded.labels,
            &test.images,
            &test.labels,
            &spec,
            proto,
            Some((&proto.augment, proto.cutmix_prob)),
            proto.seed_base + run as u64,
        )?;
        accuracies.push(acc);
    }
    Ok(EvalReport::from_accuracies(
        accuracies,
        proto.clone(),
        Space::Pixel,
        depth,
        started.elapsed().as_secs_f64(),
    ))
}

/// Train on an entire dataset (no distillation, no augmentation): the upper
/// bound for distilled performance and the pixel-vs-latent parity probe.
pub enum FullSetInput<'a> {
    Pixel {
        train: &'a RealImageDataset,
        test: &'a RealImageDataset,
    },
    /// Latent classifiers follow the latent depth schedule and consume
    /// latents standardized by the training cache's recorded statistics.
    Latent {
        train: &'a LatentDataset,
        test: &'a LatentDataset,
    },
}

pub fn full_set_baseline(input: FullSetInput<'_>, proto: &EvalProtocol) -> Result<EvalReport> {
    proto.validate()?;
    let started = Instant::now();
    match input {
        FullSetInput::Pixel { train, test } => {
            let depth = depth_for_resolution(train.resolution().0, Space::Pixel, 1)?;
            let spec = ConvNetSpec::new(
                depth,
                train.channels(),
                train.num_classes,
                train.resolution(),
                proto.width,
            )?;
            let mut accuracies = Vec::with_capacity(proto.runs);
            for run in 0..proto.runs {
                accuracies.push(train_classifier(
                    &train.images,
                    &train.labels,
                    &test.images,
                    &test.labels,
                    &spec,
                    proto,
                    None,
                    proto.seed_base + run as u64,
                )?);
            }
            Ok(EvalReport::from_accuracies(
                accuracies,
                proto.clone(),
                Space::Pixel,
                depth,
                started.elapsed().as_secs_f64(),
            ))
        }
        FullSetInput::Latent { train, test } => {
            let ef = train.effective_factor();
            let (lh, lw) = train.spatial();
            let original_res = lh * ef as usize;
            let depth = depth_for_resolution(original_res, Space::Latent, ef)?;
            let spec = ConvNetSpec::new(depth, train.c_lat(), train.num_classes, (lh, lw), proto.width)?;
            let train_std = standardize(&train.latents, &train.channel_mean, &train.channel_std);
            let test_std = standardize(&test.latents, &train.channel_mean, &train.channel_std);
            let mut accuracies = Vec::with_capacity(proto.runs);
            for run in 0..proto.runs {
                accuracies.push(train_classifier(
                    &train_std,
                    &train.labels,
                    &test_std,
                    &test.labels,
                    &spec,
                    proto,
                    None,
                    proto.seed_base + run as u64,
                )?);
            }
            Ok(EvalReport::from_accuracies(
                accuracies,
                proto.clone(),
                Space::Latent,
                depth,
                started.elapsed().as_secs_f64(),
            ))
        }
    }
}

fn standardize(latents: &Array4<f32>, mean: &[f32], std: &[f32]) -> Array4<f32> {
    let mut out = latents.clone();
    for (c, (&m, &s)) in mean.iter().zip(std).enumerate() {
        let denom = if s > 1e-6 { s } else { 1.0 };
        out.index_axis_mut(Axis(1), c)
            .mapv_inplace(|v| (v - m) / denom);
    }
    out
}

/// Train one classifier and return its top-1 test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    train_images: &Array4<f32>,
    train_labels: &[u32],
    test_images: &Array4<f32>,
    test_labels: &[u32],
    spec: &ConvNetSpec,
    proto: &EvalProtocol,
    augment: Option<(&[DsaOp], f32)>,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_convnet(
        spec,
        &InitDistribution {
            scheme: InitScheme::FanInUniform,
            seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        },
    )?;
    let mut opt = Sgd::new(proto.lr, proto.momentum);
    let n = train_images.shape()[0];
    let steps_per_epoch = n.div_ceil(proto.batch_size);
    let total_steps = (proto.epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for _epoch in 0..proto.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(proto.batch_size) {
            let images = crate::distill::dc::gather4(train_images, chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| train_labels[i]).collect();
            let (batch, mixed) = match augment {
                Some((policy, cutmix_prob)) => {
                    dsa_pixel(&images, &labels, policy, cutmix_prob, &mut rng)
                }
                None => (images, None),
            };

            // Cosine-decayed learning rate from proto.lr.
            let progress = step as f32 / total_steps as f32;
            opt.lr = proto.lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());

            let g = Graph::new();
            let params = net.lift(&g);
            let x = g.constant(batch.into_dyn());
            let logits = forward(&g, spec, &params, x);
            let loss = match &mixed {
                Some(mix) => {
                    let la = g.cross_entropy(logits, Rc::new(labels.clone()));
                    let lb = g.cross_entropy(logits, Rc::new(mix.labels_b.clone()));
                    g.add(g.scale(la, mix.lambda), g.scale(lb, 1.0 - mix.lambda))
                }
                None => g.cross_entropy(logits, Rc::new(labels.clone())),
            };
            if !g.scalar_value(loss).is_finite() {
                return Err(Error::NonFiniteLoss { iteration: step });
            }
            let grads = g.grad_arrays(loss, &params);
            opt.step(&mut net.params, &grads);
            step += 1;
        }
    }
    Ok(accuracy(&net, spec, test_images, test_labels))
}

/// Top-1 accuracy of a network over a dataset, evaluated in chunks.
pub fn accuracy(
    net: &crate::networks::ConvNet,
    spec: &ConvNetSpec,
    images: &Array4<f32>,
    labels: &[u32],
) -> f32 {
    let n = images.shape()[0];
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let g = Graph::new();
        let params = net.lift(&g);
        let x = g.constant(crate::distill::dc::gather4(images, &idx).into_dyn());
        let logits = forward(&g, spec, &params, x);
        let lv = g.value(logits);
        let k = spec.num_classes;
        for (row, &i) in idx.iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let v = lv[[row, c]];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best as u32 == labels[i] {
                correct += 1;
            }
        }
        start = end;
    }
    correct as f32 / n as f32
}
