//! Built-in desk-scale dataset: ten classes of textured blobs at 32x32.
//!
//! Each class is an oriented color grating; items vary in phase, amplitude,
//! blob placement, and carry additive noise. The noise level is chosen so a
//! handful of random examples per class underfits while the full set trains
//! to high accuracy, leaving visible headroom for distillation.

use crate::data::RealImageDataset;
use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub resolution: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 128,
            test_per_class: 64,
            resolution: 32,
            noise_std: 0.6,
            seed: 1,
        }
    }
}

// Class tints: distinct unit-ish RGB directions.
const TINTS: [[f32; 3]; 10] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.2, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 0.6, 0.2],
    [0.5, 1.0, 0.4],
    [0.4, 0.5, 1.0],
    [0.9, 0.9, 0.9],
];

fn render_item(
    class: usize,
    num_classes: usize,
    res: usize,
    noise_std: f32,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array3<f32> {
    let theta = std::f32::consts::PI * class as f32 / num_classes as f32
        + rng.gen_range(-0.05f32..0.05);
    let freq = 2.0 + (class % 3) as f32 + rng.gen_range(-0.15f32..0.15);
    let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let amp = rng.gen_range(0.6f32..1.4);
    let cx = rng.gen_range(0.3f32..0.7);
    let cy = rng.gen_range(0.3f32..0.7);
    let sigma = rng.gen_range(0.22f32..0.34);
    let tint = TINTS[class % TINTS.len()];
    let bg = rng.gen_range(-0.2f32..0.2);

    let (dir_y, dir_x) = (theta.sin(), theta.cos());
    let mut img = ndarray::Array3::<f32>::zeros((3, res, res));
    for y in 0..res {
        for x in 0..res {
            let fy = y as f32 / res as f32;
            let fx = x as f32 / res as f32;
            let t = (fx * dir_x + fy * dir_y) * freq * std::f32::consts::TAU + phase;
            let blob = (-(((fx - cx) * (fx - cx) + (fy - cy) * (fy - cy))
                / (2.0 * sigma * sigma)))
                .exp();
            let wave = amp * t.sin() * blob;
            for c in 0..3 {
                let n: f32 = StandardNormal.sample(rng);
                img[[c, y, x]] = bg + wave * tint[c] + noise_std * n;
            }
        }
    }
    img
}

fn render_split(
    cfg: &ToyConfig,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Array4<f32>, Vec<u32>) {
    let count = cfg.num_classes * per_class;
    let mut images = Array4::<f32>::zeros((count, 3, cfg.resolution, cfg.resolution));
    let mut labels = Vec::with_capacity(count);
    let mut row = 0;
    for c in 0..cfg.num_classes {
        for _ in 0..per_class {
            let img = render_item(c, cfg.num_classes, cfg.resolution, cfg.noise_std, rng);
            images.index_axis_mut(Axis(0), row).assign(&img);
            labels.push(c as u32);
            row += 1;
        }
    }
    (images, labels)
}

/// Generate the deterministic train/test splits. Both splits are
/// standardized with the training split's per-channel statistics.
pub fn generate_toy(cfg: &ToyConfig) -> (RealImageDataset, RealImageDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_images, train_labels) = render_split(cfg, cfg.train_per_class, &mut rng);
    let (mut test_images, test_labels) = render_split(cfg, cfg.test_per_class, &mut rng);

    for c in 0..3 {
        let ch = train_images.index_axis(Axis(1), c);
        let n = ch.len() as f64;
        let mean = (ch.iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        let var = ch
            .iter()
            .map(|&v| (v - mean) as f64 * (v - mean) as f64)
            .sum::<f64>()
            / n;
        let std = (var.sqrt() as f32).max(1e-6);
        train_images
            .index_axis_mut(Axis(1), c)
            .mapv_inplace(|v| (v - mean) / std);
        test_images
            .index_axis_mut(Axis(1), c)
            .mapv_inplace(|v| (v - mean) / std);
    }

    let train = RealImageDataset::new(train_images, train_labels, cfg.num_classes)
        .expect("toy train split");
    let test =
        RealImageDataset::new(test_images, test_labels, cfg.num_classes).expect("toy test split");
    (train, test)
}
