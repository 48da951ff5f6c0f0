//! Image-folder ingestion and preprocessing.
//!
//! Preprocessing applies normalization, resize to target resolution, and
//! center crop, in that order. Corrupt images are skipped with a logged
//! index rather than failing the whole ingest.

use crate::registry::DatasetRegistryEntry;
use anyhow::{bail, Context, Result};
use latentdd_core::RealImageDataset;
use ndarray::{Array3, Array4, Axis};
use std::path::Path;

/// Normalize (per-channel statistics of the incoming set), resize the
/// shorter side to `resolution`, then center-crop to a square.
pub fn preprocess(raw: Vec<(Array3<f32>, u32)>, resolution: usize) -> Result<RealImageDataset> {
    if raw.is_empty() {
        bail!("no images to preprocess");
    }
    // Per-channel statistics over every raw pixel.
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = [0.0f64; 3];
    for (img, _) in &raw {
        for c in 0..3 {
            for v in img.index_axis(Axis(0), c).iter() {
                sum[c] += *v as f64;
                sumsq[c] += (*v as f64) * (*v as f64);
                count[c] += 1.0;
            }
        }
    }
    let mut mean = [0.0f32; 3];
    let mut std = [1.0f32; 3];
    for c in 0..3 {
        let m = sum[c] / count[c];
        mean[c] = m as f32;
        std[c] = (((sumsq[c] / count[c]) - m * m).max(1e-12)).sqrt() as f32;
    }

    let num_classes = raw.iter().map(|(_, y)| *y).max().unwrap() as usize + 1;
    let mut images = Array4::<f32>::zeros((raw.len(), 3, resolution, resolution));
    let mut labels = Vec::with_capacity(raw.len());
    for (row, (img, label)) in raw.into_iter().enumerate() {
        let normalized = normalize(img, &mean, &std);
        let resized = resize_shorter_side(&normalized, resolution);
        let cropped = center_crop(&resized, resolution);
        images.index_axis_mut(Axis(0), row).assign(&cropped);
        labels.push(label);
    }
    RealImageDataset::new(images, labels, num_classes).map_err(Into::into)
}

fn normalize(mut img: Array3<f32>, mean: &[f32; 3], std: &[f32; 3]) -> Array3<f32> {
    for c in 0..3 {
        let (m, s) = (mean[c], std[c]);
        img.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / s);
    }
    img
}

/// Bilinear resize so the shorter side equals `target`; aspect preserved.
pub fn resize_shorter_side(img: &Array3<f32>, target: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if h == target && w == target {
        return img.clone();
    }
    let scale = target as f32 / h.min(w) as f32;
    let nh = ((h as f32 * scale).round() as usize).max(target);
    let nw = ((w as f32 * scale).round() as usize).max(target);
    let mut out = Array3::<f32>::zeros((c, nh, nw));
    for ci in 0..c {
        for y in 0..nh {
            // Align centers of source and destination grids.
            let sy = ((y as f32 + 0.5) / scale - 0.5).clamp(0.0, h as f32 - 1.0);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f32;
            for x in 0..nw {
                let sx = ((x as f32 + 0.5) / scale - 0.5).clamp(0.0, w as f32 - 1.0);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f32;
                let v = img[[ci, y0, x0]] * (1.0 - fy) * (1.0 - fx)
                    + img[[ci, y0, x1]] * (1.0 - fy) * fx
                    + img[[ci, y1, x0]] * fy * (1.0 - fx)
                    + img[[ci, y1, x1]] * fy * fx;
                out[[ci, y, x]] = v;
            }
        }
    }
    out
}

pub fn center_crop(img: &Array3<f32>, target: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    assert!(h >= target && w >= target, "crop larger than image");
    if h == target && w == target {
        return img.clone();
    }
    let top = (h - target) / 2;
    let left = (w - target) / 2;
    let mut out = Array3::<f32>::zeros((c, target, target));
    for ci in 0..c {
        for y in 0..target {
            for x in 0..target {
                out[[ci, y, x]] = img[[ci, top + y, left + x]];
            }
        }
    }
    out
}

/// Load `root/{train,val}/<class>/*` into (train, test) datasets. Class
/// directories may be named by class name or by source index.
pub fn load_image_folder(
    root: &Path,
    entry: &DatasetRegistryEntry,
) -> Result<(RealImageDataset, RealImageDataset)> {
    let train = load_split(root, "train", entry)?;
    let test = load_split(root, "val", entry)?;
    Ok((train, test))
}

fn load_split(root: &Path, split: &str, entry: &DatasetRegistryEntry) -> Result<RealImageDataset> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        bail!("missing split directory {}", split_dir.display());
    }
    let mut raw = Vec::new();
    for (class_id, (name, source_idx)) in entry.classes.iter().enumerate() {
        let by_name = split_dir.join(name);
        let by_index = split_dir.join(source_idx.to_string());
        let dir = if by_name.is_dir() {
            by_name
        } else if by_index.is_dir() {
            by_index
        } else {
            bail!(
                "class '{name}' not found under {} (tried '{name}' and '{source_idx}')",
                split_dir.display()
            );
        };
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        files.sort();
        for (i, file) in files.iter().enumerate() {
            match load_image(file) {
                Ok(img) => raw.push((img, class_id as u32)),
                Err(e) => log::warn!("skipping item {i} of class '{name}': {e}"),
            }
        }
    }
    preprocess(raw, entry.resolution)
}

fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (c as f32 * 0.1) + y as f32 / h as f32 + x as f32 / w as f32
        })
    }

    #[test]
    fn square_input_at_target_resolution_is_untouched_geometry() {
        let raw = vec![
            (gradient_image(16, 16), 0u32),
            (gradient_image(16, 16), 1u32),
        ];
        let ds = preprocess(raw, 16).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 16, 16]);
        // Crop is the identity here: corners of the normalized image survive.
        let img = gradient_image(16, 16);
        let normalized_corner = ds.images[[0, 0, 0, 0]];
        let normalized_far = ds.images[[0, 0, 15, 15]];
        assert!(normalized_far > normalized_corner);
        assert_eq!(img.dim(), (3, 16, 16));
    }

    #[test]
    fn rectangular_input_resizes_then_center_crops() {
        // 640x480 at target 256: shorter side 480 -> 256, longer 640 -> 341,
        // then center crop to 256x256.
        let raw = vec![(gradient_image(480, 640), 0u32), (gradient_image(480, 640), 1u32)];
        let ds = preprocess(raw, 256).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 256, 256]);
        let resized = resize_shorter_side(&gradient_image(480, 640), 256);
        assert_eq!(resized.dim(), (3, 256, 341));
    }

    #[test]
    fn normalization_zeroes_channel_means() {
        let raw = vec![
            (gradient_image(20, 20), 0u32),
            (gradient_image(24, 24), 1u32),
        ];
        let ds = preprocess(raw, 20).unwrap();
        for c in 0..3 {
            let ch = ds.images.index_axis(Axis(1), c);
            let mean: f32 = ch.iter().sum::<f32>() / ch.len() as f32;
            // Means are computed before resizing, so post-resize means are
            // near zero rather than exactly zero.
            assert!(mean.abs() < 0.05, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn center_crop_takes_middle() {
        let img = gradient_image(8, 8);
        let cropped = center_crop(&img, 4);
        assert_eq!(cropped.dim(), (3, 4, 4));
        assert_eq!(cropped[[0, 0, 0]], img[[0, 2, 2]]);
    }
}
