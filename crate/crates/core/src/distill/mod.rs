//! The three matching algorithms. Each consumes a latent cache and a
//! synthetic set and returns a loss trace; none of them ever touches pixel
//! space or applies augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod dc;
pub mod dm;
pub mod mtt;

pub use dc::{distill_dc, gradient_match_loss, DCConfig, MatchKind};
pub use dm::{distill_dm, mmd_class_loss, mmd_from_embeddings, DMConfig};
pub use mtt::{
    buffer_trajectories, distill_mtt, trajectory_match_loss, ExpertTrainConfig, MTTConfig,
    TrajectoryBuffer,
};

/// One point of the matching-loss trace emitted by every algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Outer-loop index within the iteration (0 where not applicable).
    pub outer: usize,
    pub loss: f32,
    /// Learnable model learning rate, when the algorithm has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_lr: Option<f32>,
}

pub type LossTrace = Vec<TraceRecord>;

/// Draw `n` indices from `pool`: distinct when the pool is large enough,
/// with replacement otherwise.
pub(crate) fn sample_indices(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= n {
        // Partial Fisher-Yates over a scratch copy keeps the draw unbiased
        // and deterministic.
        let mut scratch = pool.to_vec();
        for i in 0..n {
            let j = rng.gen_range(i..scratch.len());
            scratch.swap(i, j);
        }
        scratch.truncate(n);
        scratch
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}
