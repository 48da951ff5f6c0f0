//! Core datatypes shared by every pipeline stage, plus the storage-budget
//! arithmetic converting an image budget (IPC) into a latent budget (LPC).
//!
//! Class count is called `num_classes`/K throughout; `c_lat` is the latent
//! channel count. Keeping the two apart matters because budgets divide by
//! the channel count, never by the class count.

use crate::error::{Error, Result};
use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Labeled pixel dataset: images are (count, 3, H, W) floats in a
/// normalized range.
#[derive(Debug, Clone)]
pub struct RealImageDataset {
    pub images: Array4<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    /// Per-class item indices, class id -> indices into `images`.
    pub class_index: Vec<Vec<usize>>,
}

impl RealImageDataset {
    pub fn new(images: Array4<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        let class_index = build_class_index(&labels, num_classes)?;
        for (c, idx) in class_index.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::EmptyClass { class: c });
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }
}

fn build_class_index(labels: &[u32], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut index = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        index[y as usize].push(i);
    }
    Ok(index)
}

/// Real images encoded into latent codes, with the codec provenance needed
/// to decode them again.
#[derive(Debug, Clone)]
pub struct LatentDataset {
    pub latents: Array4<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub class_index: Vec<Vec<usize>>,
    /// Codec downsampling factor (native, before pre-upsampling).
    pub factor: u32,
    /// Integer resize factor applied to images before encoding.
    pub pre_upsample: u32,
    /// Content hash of the codec weights that produced this cache.
    pub codec_fingerprint: String,
    /// Per-channel statistics of the latents, recorded for optional
    /// classifier-input standardization.
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
}

impl LatentDataset {
    pub fn new(
        latents: Array4<f32>,
        labels: Vec<u32>,
        num_classes: usize,
        factor: u32,
        pre_upsample: u32,
        codec_fingerprint: String,
    ) -> Result<Self> {
        if latents.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} latents but {} labels",
                latents.shape()[0],
                labels.len()
            )));
        }
        if codec_fingerprint.is_empty() {
            return Err(Error::InvalidArgument("empty codec fingerprint".into()));
        }
        let class_index = build_class_index(&labels, num_classes)?;
        for (c, idx) in class_index.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::EmptyClass { class: c });
            }
        }
        let (channel_mean, channel_std) = channel_stats(&latents);
        Ok(Self {
            latents,
            labels,
            num_classes,
            class_index,
            factor,
            pre_upsample,
            codec_fingerprint,
            channel_mean,
            channel_std,
        })
    }

    pub fn len(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn c_lat(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.latents.shape()[2], self.latents.shape()[3])
    }

    /// Downsampling factor after accounting for pre-upsampling.
    pub fn effective_factor(&self) -> u32 {
        self.factor / self.pre_upsample
    }

    /// Content hash of latents and labels; ties trajectory buffers and
    /// synthetic sets to the cache they were computed from.
    pub fn content_fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for d in self.latents.shape() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in self.latents.iter() {
            hasher.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update(l.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub(crate) fn channel_stats(latents: &Array4<f32>) -> (Vec<f32>, Vec<f32>) {
    let c = latents.shape()[1];
    let mut mean = vec![0.0f32; c];
    let mut std = vec![0.0f32; c];
    for ci in 0..c {
        let ch = latents.index_axis(Axis(1), ci);
        let n = ch.len() as f64;
        let m: f64 = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let v: f64 = ch.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / n;
        mean[ci] = m as f32;
        std[ci] = v.sqrt() as f32;
    }
    (mean, std)
}

/// Storage budget: how many latent codes fit in the space of `ipc`
/// pixel-level images per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub ipc: usize,
    /// Effective downsampling factor relating image and latent spatial size.
    pub factor: u32,
    pub c_lat: usize,
    pub img_channels: usize,
    pub lpc: usize,
}

impl BudgetSpec {
    pub fn new(ipc: usize, factor: u32, c_lat: usize) -> Result<Self> {
        let lpc = compute_lpc(ipc, factor, c_lat)?;
        Ok(Self {
            ipc,
            factor,
            c_lat,
            img_channels: 3,
            lpc,
        })
    }
}

/// Latents per class affordable within an `ipc`-image budget:
/// floor(ipc * 3 * f^2 / c_lat). Counts parameters, not bytes.
pub fn compute_lpc(ipc: usize, factor: u32, c_lat: usize) -> Result<usize> {
    if ipc == 0 || factor == 0 || c_lat == 0 {
        return Err(Error::InvalidArgument(
            "compute_lpc arguments must be positive".into(),
        ));
    }
    Ok(ipc * 3 * (factor as usize) * (factor as usize) / c_lat)
}

/// Shape of the latent code for an image of `image_shape` under factor `f`.
pub fn latent_shape(
    image_shape: (usize, usize, usize),
    factor: u32,
    c_lat: usize,
) -> Result<(usize, usize, usize)> {
    let (_, h, w) = image_shape;
    let f = factor as usize;
    if f == 0 || c_lat == 0 {
        return Err(Error::InvalidArgument(
            "latent_shape arguments must be positive".into(),
        ));
    }
    if h % f != 0 {
        return Err(Error::Shape {
            axis: "height",
            msg: format!("height {h} not divisible by factor {f}"),
        });
    }
    if w % f != 0 {
        return Err(Error::Shape {
            axis: "width",
            msg: format!("width {w} not divisible by factor {f}"),
        });
    }
    Ok((c_lat, h / f, w / f))
}

/// Identifies which matching algorithm produced a synthetic set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Init,
    Dc,
    Dm,
    Mtt,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Init => "init",
            Algorithm::Dc => "dc",
            Algorithm::Dm => "dm",
            Algorithm::Mtt => "mtt",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Algorithm::Init),
            "dc" => Ok(Algorithm::Dc),
            "dm" => Ok(Algorithm::Dm),
            "mtt" => Ok(Algorithm::Mtt),
            other => Err(Error::InvalidArgument(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Provenance carried alongside a synthetic set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub iterations: usize,
}

/// The optimized variable of distillation: `lpc` latent codes per class
/// with fixed integer labels.
///
/// Labels are immutable for the lifetime of the set; rows belonging to
/// class `c` occupy the contiguous block `[c*lpc, (c+1)*lpc)`.
#[derive(Debug, Clone)]
pub struct SyntheticLatentSet {
    latents: Array4<f32>,
    labels: Vec<u32>,
    pub budget: BudgetSpec,
    pub num_classes: usize,
    pub meta: SyntheticMeta,
}

impl SyntheticLatentSet {
    pub fn from_parts(
        latents: Array4<f32>,
        labels: Vec<u32>,
        budget: BudgetSpec,
        num_classes: usize,
        meta: SyntheticMeta,
    ) -> Result<Self> {
        if latents.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument("latent/label count mismatch".into()));
        }
        if labels.len() != budget.lpc * num_classes {
            return Err(Error::InvalidArgument(format!(
                "expected {} rows ({} classes x lpc {}), got {}",
                budget.lpc * num_classes,
                num_classes,
                budget.lpc,
                labels.len()
            )));
        }
        Ok(Self {
            latents,
            labels,
            budget,
            num_classes,
            meta,
        })
    }

    pub fn latents(&self) -> &Array4<f32> {
        &self.latents
    }

    /// Mutable access for the single optimizer owner.
    pub fn latents_mut(&mut self) -> &mut Array4<f32> {
        &mut self.latents
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row range holding class `c`.
    pub fn class_rows(&self, c: usize) -> std::ops::Range<usize> {
        c * self.budget.lpc..(c + 1) * self.budget.lpc
    }
}

/// Draw `lpc` real latents per class as the starting synthetic set.
///
/// Sampling is without replacement when a class has at least `lpc` items,
/// with replacement (and a logged warning) otherwise. Rows are copied, never
/// aliased, and the draw is fully determined by `seed`.
pub fn init_synthetic(
    real: &LatentDataset,
    budget: &BudgetSpec,
    seed: u64,
) -> Result<SyntheticLatentSet> {
    if budget.c_lat != real.c_lat() {
        return Err(Error::InvalidArgument(format!(
            "budget c_lat {} != dataset c_lat {}",
            budget.c_lat,
            real.c_lat()
        )));
    }
    let lpc = budget.lpc;
    let k = real.num_classes;
    let (h, w) = real.spatial();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut latents = Array4::<f32>::zeros((k * lpc, real.c_lat(), h, w));
    let mut labels = Vec::with_capacity(k * lpc);
    for c in 0..k {
        let pool = &real.class_index[c];
        if pool.is_empty() {
            return Err(Error::EmptyClass { class: c });
        }
        let chosen: Vec<usize> = if pool.len() >= lpc {
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            shuffled.truncate(lpc);
            shuffled
        } else {
            log::warn!(
                "class {c} has {} items but lpc is {lpc}; sampling with replacement",
                pool.len()
            );
            (0..lpc).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        };
        for (offset, &src) in chosen.iter().enumerate() {
            latents
                .index_axis_mut(Axis(0), c * lpc + offset)
                .assign(&real.latents.index_axis(Axis(0), src));
            labels.push(c as u32);
        }
    }
    SyntheticLatentSet::from_parts(
        latents,
        labels,
        *budget,
        k,
        SyntheticMeta {
            seed,
            algorithm: Algorithm::Init,
            iterations: 0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;

    fn toy_latents(per_class: &[usize], c_lat: usize, hw: usize) -> LatentDataset {
        let count: usize = per_class.iter().sum();
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat(c as u32).take(n));
        }
        let latents = Array4::from_shape_fn((count, c_lat, hw, hw), |(i, c, y, x)| {
            (i * 1000 + c * 100 + y * 10 + x) as f32
        });
        LatentDataset::new(latents, labels, per_class.len(), 4, 1, "test".into()).unwrap()
    }

    #[test]
    fn lpc_matches_cited_configurations() {
        assert_eq!(compute_lpc(1, 4, 4).unwrap(), 12);
        assert_eq!(compute_lpc(1, 8, 4).unwrap(), 48);
        assert_eq!(compute_lpc(10, 4, 4).unwrap(), 120);
    }

    #[test]
    fn lpc_rejects_nonpositive() {
        assert!(compute_lpc(0, 4, 4).is_err());
        assert!(compute_lpc(1, 0, 4).is_err());
        assert!(compute_lpc(1, 4, 0).is_err());
    }

    #[test]
    fn latent_shape_cases() {
        assert_eq!(latent_shape((3, 512, 512), 8, 4).unwrap(), (4, 64, 64));
        // Parameter ratio c_lat / (3 f^2) = 4 / 192 = 1/48.
        let (c, h, w) = latent_shape((3, 512, 512), 8, 4).unwrap();
        let ratio = (c * h * w) as f64 / (3.0 * 512.0 * 512.0);
        assert!((ratio - 1.0 / 48.0).abs() < 1e-12);
        assert_eq!(latent_shape((3, 64, 64), 1, 3).unwrap(), (3, 64, 64));
        let err = latent_shape((3, 100, 64), 8, 4).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "height", .. }));
        let err = latent_shape((3, 64, 100), 8, 4).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "width", .. }));
    }

    #[test]
    fn budget_lpc_at_least_ipc() {
        // c_lat < 3 f^2 guarantees compression, so lpc >= ipc.
        for f in [2u32, 4, 8] {
            for c_lat in 1..(3 * (f * f) as usize) {
                for ipc in [1usize, 3, 10] {
                    let b = BudgetSpec::new(ipc, f, c_lat).unwrap();
                    assert!(b.lpc >= b.ipc, "lpc {} < ipc {}", b.lpc, b.ipc);
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_copies() {
        let real = toy_latents(&[5, 5, 5], 2, 4);
        let budget = BudgetSpec::new(1, 2, 2).unwrap(); // lpc = 6 > 5: replacement path
        let a = init_synthetic(&real, &budget, 42).unwrap();
        let b = init_synthetic(&real, &budget, 42).unwrap();
        assert_eq!(a.latents(), b.latents());
        assert_eq!(a.labels(), b.labels());
        let c = init_synthetic(&real, &budget, 43).unwrap();
        assert_ne!(a.latents(), c.latents());
    }

    #[test]
    fn init_exhausts_class_when_sizes_match() {
        // lpc = 3*2*2/4 = 3 equals the class size: a permutation of the class.
        let real = toy_latents(&[3, 3], 4, 4);
        let budget = BudgetSpec::new(1, 2, 4).unwrap();
        assert_eq!(budget.lpc, 3);
        let syn = init_synthetic(&real, &budget, 7).unwrap();
        for c in 0..2 {
            let mut got: Vec<f32> = syn
                .class_rows(c)
                .map(|r| syn.latents()[[r, 0, 0, 0]])
                .collect();
            let mut expect: Vec<f32> = real.class_index[c]
                .iter()
                .map(|&i| real.latents[[i, 0, 0, 0]])
                .collect();
            got.sort_by(f32::total_cmp);
            expect.sort_by(f32::total_cmp);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn init_shape_for_ten_class_lpc12() {
        let real = toy_latents(&[20; 10], 4, 8);
        let budget = BudgetSpec::new(1, 4, 4).unwrap();
        assert_eq!(budget.lpc, 12);
        let syn = init_synthetic(&real, &budget, 0).unwrap();
        assert_eq!(syn.latents().shape(), &[120, 4, 8, 8]);
        // Sorted by class, exactly lpc copies of each id.
        for c in 0..10 {
            for r in syn.class_rows(c) {
                assert_eq!(syn.labels()[r], c as u32);
            }
        }
    }

    #[test]
    fn empty_class_is_reported() {
        let latents = Array4::<f32>::zeros((2, 1, 2, 2));
        let err = LatentDataset::new(latents, vec![0, 0], 2, 1, 1, "x".into());
        assert!(err.is_err());
    }

    #[test]
    fn labels_survive_latent_mutation() {
        let real = toy_latents(&[4, 4], 2, 4);
        let budget = BudgetSpec::new(1, 2, 2).unwrap();
        let mut syn = init_synthetic(&real, &budget, 1).unwrap();
        let before = syn.labels().to_vec();
        syn.latents_mut().fill(3.25);
        assert_eq!(syn.labels(), &before[..]);
    }

    proptest! {
        #[test]
        fn lpc_monotone(ipc in 1usize..20, f in 1u32..10, c in 1usize..48) {
            let base = compute_lpc(ipc, f, c).unwrap();
            prop_assert!(compute_lpc(ipc + 1, f, c).unwrap() >= base);
            prop_assert!(compute_lpc(ipc, f + 1, c).unwrap() >= base);
            prop_assert!(compute_lpc(ipc, f, c + 1).unwrap() <= base);
        }
    }
}
