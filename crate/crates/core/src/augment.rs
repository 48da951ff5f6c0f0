//! Pixel-space augmentation for evaluation-time classifier training.
//!
//! One transform from the policy is drawn per batch (the siamese
//! convention); CutMix, when listed, is applied on top with probability
//! 0.5 and produces convex label pairs weighted by the unpatched area
//! fraction. None of this is used inside distillation loops, which operate
//! on latents and take no augmentation policy at all.

use crate::error::{Error, Result};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsaOp {
    Color,
    Crop,
    Flip,
    Scale,
    Rotate,
    Cutmix,
}

impl std::str::FromStr for DsaOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(DsaOp::Color),
            "crop" => Ok(DsaOp::Crop),
            "flip" => Ok(DsaOp::Flip),
            "scale" => Ok(DsaOp::Scale),
            "rotate" => Ok(DsaOp::Rotate),
            "cutmix" => Ok(DsaOp::Cutmix),
            other => Err(Error::UnknownPolicy(other.to_string())),
        }
    }
}

/// Secondary labels and mixing weight produced by CutMix. The training
/// loss becomes `lambda * ce(y) + (1 - lambda) * ce(labels_b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLabels {
    pub labels_b: Vec<u32>,
    pub lambda: f32,
}

/// Apply the policy to one batch. Shape-preserving; an empty policy is the
/// identity.
pub fn dsa_pixel(
    batch: &Array4<f32>,
    labels: &[u32],
    policy: &[DsaOp],
    cutmix_prob: f32,
    rng: &mut ChaCha8Rng,
) -> (Array4<f32>, Option<MixedLabels>) {
    let mut out = batch.clone();
    let base_ops: Vec<DsaOp> = policy
        .iter()
        .copied()
        .filter(|op| *op != DsaOp::Cutmix)
        .collect();
    if !base_ops.is_empty() {
        let op = base_ops[rng.gen_range(0..base_ops.len())];
        out = apply_base(&out, op, rng);
    }
    let mut mixed = None;
    if policy.contains(&DsaOp::Cutmix) && rng.gen::<f32>() < cutmix_prob {
        let n = out.shape()[0];
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(rng);
        let (h, w) = (out.shape()[2], out.shape()[3]);
        let patch = draw_cutmix_box(h, w, rng);
        let lambda = cutmix(&mut out, &perm, patch);
        mixed = Some(MixedLabels {
            labels_b: perm.iter().map(|&i| labels[i]).collect(),
            lambda,
        });
    }
    (out, mixed)
}

fn apply_base(batch: &Array4<f32>, op: DsaOp, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let n = batch.shape()[0];
    match op {
        DsaOp::Flip => {
            let mask: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
            flip_horizontal(batch, &mask)
        }
        DsaOp::Color => {
            let params: Vec<ColorJitter> = (0..n)
                .map(|_| ColorJitter {
                    brightness: rng.gen_range(-0.3f32..0.3),
                    contrast: rng.gen_range(0.7f32..1.3),
                    saturation: rng.gen_range(0.5f32..1.5),
                })
                .collect();
            color_jitter(batch, &params)
        }
        DsaOp::Crop => {
            let pad = (batch.shape()[2] / 8).max(1) as i64;
            let shifts: Vec<(i64, i64)> = (0..n)
                .map(|_| (rng.gen_range(-pad..=pad), rng.gen_range(-pad..=pad)))
                .collect();
            shift_crop(batch, &shifts)
        }
        DsaOp::Scale => {
            let factors: Vec<f32> = (0..n).map(|_| rng.gen_range(0.8f32..1.25)).collect();
            resample_affine(batch, &factors, &vec![0.0; n])
        }
        DsaOp::Rotate => {
            let angles: Vec<f32> = (0..n)
                .map(|_| rng.gen_range(-15.0f32..15.0) * std::f32::consts::PI / 180.0)
                .collect();
            resample_affine(batch, &vec![1.0; n], &angles)
        }
        DsaOp::Cutmix => unreachable!("cutmix handled separately"),
    }
}

/// Mirror the width axis of the masked items. An involution: applying the
/// same mask twice restores the input.
pub fn flip_horizontal(batch: &Array4<f32>, mask: &[bool]) -> Array4<f32> {
    let mut out = batch.clone();
    let (_, c, h, w) = batch.dim();
    for (i, &flip) in mask.iter().enumerate() {
        if !flip {
            continue;
        }
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[i, ci, y, x]] = batch[[i, ci, y, w - 1 - x]];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

pub fn color_jitter(batch: &Array4<f32>, params: &[ColorJitter]) -> Array4<f32> {
    let mut out = batch.clone();
    let (_, c, h, w) = batch.dim();
    for (i, p) in params.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut gray = 0.0;
                for ci in 0..c {
                    gray += batch[[i, ci, y, x]];
                }
                gray /= c as f32;
                for ci in 0..c {
                    let v = batch[[i, ci, y, x]];
                    let sat = gray + (v - gray) * p.saturation;
                    out[[i, ci, y, x]] = sat * p.contrast + p.brightness;
                }
            }
        }
    }
    out
}

/// Translate with zero fill, the pad-and-crop augmentation.
pub fn shift_crop(batch: &Array4<f32>, shifts: &[(i64, i64)]) -> Array4<f32> {
    let (n, c, h, w) = batch.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for (i, &(dy, dx)) in shifts.iter().enumerate() {
        for ci in 0..c {
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    out[[i, ci, y as usize, x as usize]] =
                        batch[[i, ci, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}

/// Zoom and/or rotate about the image center (nearest sampling, zero fill).
pub fn resample_affine(batch: &Array4<f32>, scales: &[f32], angles: &[f32]) -> Array4<f32> {
    let (n, c, h, w) = batch.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    for i in 0..n {
        let s = scales[i];
        let (sin, cos) = angles[i].sin_cos();
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // Inverse map: rotate by -angle, scale by 1/s.
                    let dy = y as f32 - cy;
                    let dx = x as f32 - cx;
                    let sy = (cos * dy + sin * dx) / s + cy;
                    let sx = (-sin * dy + cos * dx) / s + cx;
                    let (ry, rx) = (sy.round() as i64, sx.round() as i64);
                    if ry >= 0 && ry < h as i64 && rx >= 0 && rx < w as i64 {
                        out[[i, ci, y, x]] = batch[[i, ci, ry as usize, rx as usize]];
                    }
                }
            }
        }
    }
    out
}

/// Rectangular patch in image coordinates (top, left, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutmixBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draw a CutMix box: area fraction 1 - lambda with lambda ~ Beta(1, 1)
/// (uniform), centered uniformly and clipped to the image.
pub fn draw_cutmix_box(h: usize, w: usize, rng: &mut ChaCha8Rng) -> CutmixBox {
    let lam: f32 = rng.gen::<f32>();
    let ratio = (1.0 - lam).sqrt();
    // Clamp to keep the label pair strictly convex: never empty, never the
    // whole image.
    let bh = ((h as f32 * ratio).round() as usize).clamp(1, h - 1);
    let bw = ((w as f32 * ratio).round() as usize).clamp(1, w - 1);
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let top = cy.saturating_sub(bh / 2).min(h - bh.max(1));
    let left = cx.saturating_sub(bw / 2).min(w - bw.max(1));
    let height = bh.min(h - top);
    let width = bw.min(w - left);
    CutmixBox {
        top,
        left,
        height,
        width,
    }
}

/// Paste `patch` from each item's partner into the item. Returns the label
/// weight of the original item: the unpatched area fraction.
pub fn cutmix(batch: &mut Array4<f32>, perm: &[usize], patch: CutmixBox) -> f32 {
    let (n, c, h, w) = batch.dim();
    let src = batch.clone();
    for i in 0..n {
        let j = perm[i];
        for ci in 0..c {
            for y in patch.top..patch.top + patch.height {
                for x in patch.left..patch.left + patch.width {
                    batch[[i, ci, y, x]] = src[[j, ci, y, x]];
                }
            }
        }
    }
    1.0 - (patch.height * patch.width) as f32 / (h * w) as f32
}

/// Convenience: seeded policy application for callers without an rng.
pub fn dsa_pixel_seeded(
    batch: &Array4<f32>,
    labels: &[u32],
    policy: &[DsaOp],
    cutmix_prob: f32,
    seed: u64,
) -> (Array4<f32>, Option<MixedLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dsa_pixel(batch, labels, policy, cutmix_prob, &mut rng)
}
