//! Trajectory-matching distillation: expert buffering and the unrolled
//! student loop with a learnable student learning rate.

use super::{sample_indices, LossTrace, TraceRecord};
use crate::autodiff::{Graph, Var};
use crate::data::{LatentDataset, SyntheticLatentSet};
use crate::distill::dc::gather4;
use crate::error::{Error, Result};
use crate::networks::{build_convnet, forward, ConvNet, ConvNetSpec, InitDistribution, InitScheme};
use crate::optim::Sgd;
use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

const SYN_MOMENTUM: f32 = 0.5;
/// The learnable model learning rate is clamped here rather than allowed
/// to cross zero.
const ETA_MODEL_FLOOR: f32 = 1e-8;

/// Epoch-wise parameter snapshots of networks trained on the real latent
/// dataset. Snapshot 0 is the initialization, so a trajectory trained for
/// `E` epochs holds `E + 1` snapshots.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    pub spec: ConvNetSpec,
    pub dataset_fingerprint: String,
    pub epochs_per_expert: usize,
    pub experts: Vec<Vec<Array1<f32>>>,
    /// Divergent experts dropped during buffering.
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertTrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Train `num_experts` independently initialized networks on the latent
/// dataset, snapshotting flattened parameters after every epoch.
pub fn buffer_trajectories(
    real: &LatentDataset,
    spec: &ConvNetSpec,
    num_experts: usize,
    epochs: usize,
    cfg: &ExpertTrainConfig,
) -> Result<TrajectoryBuffer> {
    spec.validate()?;
    if num_experts == 0 || epochs == 0 {
        return Err(Error::InvalidArgument(
            "num_experts and epochs must be positive".into(),
        ));
    }
    let results: Vec<Option<Vec<Array1<f32>>>> = (0..num_experts)
        .into_par_iter()
        .map(|e| train_expert(real, spec, epochs, cfg, e as u64))
        .collect();
    let mut experts = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            Some(traj) => experts.push(traj),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} divergent expert(s) skipped during buffering");
    }
    if experts.is_empty() {
        return Err(Error::TrainingDiverged {
            step: 0,
            last_loss: f32::NAN,
        });
    }
    Ok(TrajectoryBuffer {
        spec: *spec,
        dataset_fingerprint: real.content_fingerprint(),
        epochs_per_expert: epochs,
        experts,
        skipped,
    })
}

fn train_expert(
    real: &LatentDataset,
    spec: &ConvNetSpec,
    epochs: usize,
    cfg: &ExpertTrainConfig,
    expert_id: u64,
) -> Option<Vec<Array1<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(expert_id));
    let mut net = build_convnet(
        spec,
        &InitDistribution {
            scheme: InitScheme::FanInUniform,
            seed: rng.gen(),
        },
    )
    .ok()?;
    let mut snapshots = vec![net.flatten_params()];
    let mut order: Vec<usize> = (0..real.len()).collect();
    use rand::seq::SliceRandom;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let params = net.lift(&g);
            let x = g.constant(gather4(&real.latents, batch).into_dyn());
            let labels = Rc::new(batch.iter().map(|&i| real.labels[i]).collect::<Vec<u32>>());
            let loss = g.cross_entropy(forward(&g, spec, &params, x), labels);
            if !g.scalar_value(loss).is_finite() {
                return None;
            }
            let grads = g.grad_arrays(loss, &params);
            for (p, gr) in net.params.iter_mut().zip(grads) {
                p.zip_mut_with(&gr, |pv, gv| *pv -= cfg.lr * gv);
            }
        }
        snapshots.push(net.flatten_params());
    }
    Some(snapshots)
}

/// Normalized squared distance between the student endpoint and the expert
/// target: ||student - target||^2 / ||start - target||^2.
pub fn trajectory_match_loss(
    student: ArrayView1<f32>,
    start: ArrayView1<f32>,
    target: ArrayView1<f32>,
) -> Result<f32> {
    if student.len() != start.len() || start.len() != target.len() {
        return Err(Error::GradStructure(format!(
            "parameter lengths {} / {} / {}",
            student.len(),
            start.len(),
            target.len()
        )));
    }
    let num: f64 = student
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    let den: f64 = start
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    if den == 0.0 {
        return Err(Error::DegenerateTrajectory);
    }
    Ok((num / den) as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MTTConfig {
    pub iterations: usize,
    /// Maximum starting epoch T+; the start is drawn uniformly from
    /// {0, ..., T+} inclusive.
    pub max_start_epoch: usize,
    /// Expert epochs M the target snapshot lies ahead of the start.
    pub expert_epochs: usize,
    /// Unrolled student steps N per iteration.
    pub student_steps: usize,
    /// Learning rate per latent code.
    pub eta_base: f32,
    /// Initial learnable model learning rate.
    pub eta_model_init: f32,
    /// Learning rate applied to the model learning rate itself.
    pub lr_lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Tape memory guard for the unrolled computation.
    pub memory_limit_bytes: usize,
}

impl Default for MTTConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            max_start_epoch: 5,
            expert_epochs: 1,
            student_steps: 40,
            eta_base: 50.0,
            eta_model_init: 0.01,
            lr_lr: 1e-6,
            batch_size: 64,
            seed: 0,
            memory_limit_bytes: 6 << 30,
        }
    }
}

impl MTTConfig {
    pub fn validate(&self, buffer: &TrajectoryBuffer) -> Result<()> {
        if self.lr_lr <= 0.0 || self.eta_base <= 0.0 || self.eta_model_init <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.max_start_epoch + self.expert_epochs > buffer.epochs_per_expert {
            return Err(Error::InvalidArgument(format!(
                "max_start_epoch {} + expert_epochs {} exceeds buffered epochs {}",
                self.max_start_epoch, self.expert_epochs, buffer.epochs_per_expert
            )));
        }
        Ok(())
    }
}

/// Run trajectory matching, mutating `syn` in place.
///
/// Returns the loss trace and the final learnable model learning rate.
/// Gradients flow to the synthetic latents (and the model learning rate)
/// through all `student_steps` unrolled updates. The buffer is read-only.
pub fn distill_mtt(
    real: &LatentDataset,
    syn: &mut SyntheticLatentSet,
    buffer: &TrajectoryBuffer,
    cfg: &MTTConfig,
) -> Result<(LossTrace, f32)> {
    cfg.validate(buffer)?;
    let expected = real.content_fingerprint();
    if buffer.dataset_fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: buffer.dataset_fingerprint.clone(),
        });
    }
    let spec = buffer.spec;
    let sh = syn.latents().shape();
    if spec.in_channels != sh[1] || spec.input_hw != (sh[2], sh[3]) {
        return Err(Error::Shape {
            axis: "channels",
            msg: format!(
                "buffer spec expects {}x{}x{}, synthetic latents are {}x{}x{}",
                spec.in_channels, spec.input_hw.0, spec.input_hw.1, sh[1], sh[2], sh[3]
            ),
        });
    }

    let mut eta_model = cfg.eta_model_init;
    let mut opt = Sgd::new(cfg.eta_base * syn.budget.lpc as f32, SYN_MOMENTUM);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let all_rows: Vec<usize> = (0..syn.len()).collect();
    let labels = syn.labels().to_vec();

    for iter in 0..cfg.iterations {
        // Degenerate start/target pairs are skipped by redrawing.
        let mut picked = None;
        for _attempt in 0..10 {
            let t = rng.gen_range(0..=cfg.max_start_epoch);
            let e = rng.gen_range(0..buffer.experts.len());
            let start = &buffer.experts[e][t];
            let target = &buffer.experts[e][t + cfg.expert_epochs];
            let den: f64 = start
                .iter()
                .zip(target.iter())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            if den > 0.0 {
                picked = Some((start, target, den));
                break;
            }
            log::warn!("degenerate expert segment at epoch {t}; redrawing");
        }
        let Some((start, target, den)) = picked else {
            return Err(Error::DegenerateTrajectory);
        };

        let g = Graph::new();
        let syn_leaf = g.constant(syn.latents().clone().into_dyn());
        let eta_leaf = g.constant(ndarray::arr0(eta_model).into_dyn());
        let start_net = ConvNet::unflatten_params(start, &spec)?;
        let mut theta: Vec<Var> = start_net.params.iter().map(|p| g.constant(p.clone())).collect();

        for _n in 0..cfg.student_steps {
            let idx = sample_indices(&all_rows, cfg.batch_size.min(all_rows.len()), &mut rng);
            let batch_labels = Rc::new(idx.iter().map(|&i| labels[i]).collect::<Vec<u32>>());
            let x = g.take_rows(syn_leaf, Rc::new(idx));
            let loss_n = g.cross_entropy(forward(&g, &spec, &theta, x), batch_labels);
            let grads = g.grad(loss_n, &theta);
            theta = theta
                .iter()
                .zip(grads)
                .map(|(&t, gr)| match gr {
                    Some(gr) => g.sub(t, g.scale_v(gr, eta_leaf)),
                    None => t,
                })
                .collect();
            if g.bytes_used() > cfg.memory_limit_bytes {
                return Err(Error::MemoryGuard {
                    used: g.bytes_used(),
                    limit: cfg.memory_limit_bytes,
                });
            }
        }

        // ||theta_N - target||^2 / ||start - target||^2; the denominator is
        // expert-only and enters as a constant.
        let target_net = ConvNet::unflatten_params(target, &spec)?;
        let mut dist: Option<Var> = None;
        for (t, tgt) in theta.iter().zip(&target_net.params) {
            let tv = g.constant(tgt.clone());
            let term = g.sum_sq(g.sub(*t, tv));
            dist = Some(match dist {
                Some(d) => g.add(d, term),
                None => term,
            });
        }
        let loss = g.scale(dist.expect("nonempty params"), (1.0 / den) as f32);
        let loss_value = g.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }

        let grads = g.grad(loss, &[syn_leaf, eta_leaf]);
        if let Some(sg) = grads[0] {
            let grad = g.value(sg).as_ref().clone();
            let mut param_list = [syn.latents().clone().into_dyn()];
            opt.step(&mut param_list, &[grad]);
            let updated = param_list[0]
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("syn rank 4");
            syn.latents_mut().assign(&updated);
        }
        if let Some(eg) = grads[1] {
            let eta_grad = g.scalar_value(eg);
            eta_model -= cfg.lr_lr * eta_grad;
            if eta_model < ETA_MODEL_FLOOR {
                log::warn!("model learning rate clamped at {ETA_MODEL_FLOOR}");
                eta_model = ETA_MODEL_FLOOR;
            }
        }
        trace.push(TraceRecord {
            iteration: iter,
            outer: 0,
            loss: loss_value,
            model_lr: Some(eta_model),
        });
    }
    Ok((trace, eta_model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_synthetic, BudgetSpec};
    use ndarray::{arr1, Array4, Axis};

    fn tiny_latent_set(seed: u64) -> LatentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = 24;
        let mut latents = Array4::<f32>::zeros((count, 1, 4, 4));
        let mut labels = Vec::new();
        for i in 0..count {
            let class = i % 2;
            let center = if class == 0 { 1.0 } else { -1.0 };
            latents
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| center + rng.gen_range(-0.3f32..0.3));
            labels.push(class as u32);
        }
        LatentDataset::new(latents, labels, 2, 2, 1, "toy".into()).unwrap()
    }

    fn tiny_spec() -> ConvNetSpec {
        ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap()
    }

    #[test]
    fn trajectory_loss_analytic_cases() {
        let start = arr1(&[0.0f32, 0.0]);
        let target = arr1(&[1.0f32, 0.0]);
        let mid = arr1(&[0.5f32, 0.0]);
        assert!(
            trajectory_match_loss(target.view(), start.view(), target.view()).unwrap() < 1e-12
        );
        let one = trajectory_match_loss(start.view(), start.view(), target.view()).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let quarter = trajectory_match_loss(mid.view(), start.view(), target.view()).unwrap();
        assert!((quarter - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_is_an_error() {
        let a = arr1(&[1.0f32, 2.0]);
        assert!(matches!(
            trajectory_match_loss(a.view(), a.view(), a.view()),
            Err(Error::DegenerateTrajectory)
        ));
        let short = arr1(&[1.0f32]);
        assert!(trajectory_match_loss(short.view(), a.view(), a.view()).is_err());
    }

    #[test]
    fn loss_invariant_under_orthogonal_transform_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8;
        let student = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0f32..1.0));
        let start = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0f32..1.0));
        let target = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0f32..1.0));
        let base =
            trajectory_match_loss(student.view(), start.view(), target.view()).unwrap();

        // Permutation is orthogonal.
        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let apply = |v: &Array1<f32>| Array1::from_shape_fn(n, |i| v[perm[i]]);
        let p = trajectory_match_loss(
            apply(&student).view(),
            apply(&start).view(),
            apply(&target).view(),
        )
        .unwrap();
        assert!((p - base).abs() < 1e-6);

        // Common scaling cancels in the ratio.
        let s = 3.7f32;
        let scale = |v: &Array1<f32>| v.mapv(|x| x * s);
        let sc = trajectory_match_loss(
            scale(&student).view(),
            scale(&start).view(),
            scale(&target).view(),
        )
        .unwrap();
        assert!((sc - base).abs() < 1e-5 * base.max(1.0));
    }

    #[test]
    fn buffer_snapshot_fencepost_and_seeds() {
        let real = tiny_latent_set(31);
        let spec = tiny_spec();
        let buf = buffer_trajectories(&real, &spec, 2, 3, &ExpertTrainConfig::default()).unwrap();
        assert_eq!(buf.experts.len(), 2);
        for traj in &buf.experts {
            assert_eq!(traj.len(), 4); // epochs + initialization
            for snap in traj {
                assert_eq!(snap.len(), spec.param_count());
            }
        }
        assert_ne!(buf.experts[0][0], buf.experts[1][0]);
        assert_eq!(buf.skipped, 0);
    }

    #[test]
    fn experts_learn_on_separable_data() {
        let real = tiny_latent_set(32);
        let spec = tiny_spec();
        let cfg = ExpertTrainConfig {
            lr: 0.05,
            batch_size: 8,
            seed: 1,
        };
        let buf = buffer_trajectories(&real, &spec, 1, 4, &cfg).unwrap();
        let acc_of = |flat: &Array1<f32>| {
            let net = ConvNet::unflatten_params(flat, &spec).unwrap();
            let g = Graph::new();
            let params = net.lift(&g);
            let x = g.constant(real.latents.clone().into_dyn());
            let logits = forward(&g, &spec, &params, x);
            let lv = g.value(logits);
            let mut correct = 0;
            for i in 0..real.len() {
                let row: Vec<f32> = (0..2).map(|k| lv[[i, k]]).collect();
                let pred = if row[0] >= row[1] { 0u32 } else { 1 };
                if pred == real.labels[i] {
                    correct += 1;
                }
            }
            correct as f32 / real.len() as f32
        };
        let first = acc_of(&buf.experts[0][0]);
        let last = acc_of(buf.experts[0].last().unwrap());
        assert!(last > first, "expert did not improve: {first} -> {last}");
    }

    fn mtt_setup(seed: u64) -> (LatentDataset, SyntheticLatentSet, TrajectoryBuffer) {
        let real = tiny_latent_set(seed);
        let spec = tiny_spec();
        let budget = BudgetSpec::new(1, 1, 1).unwrap();
        let syn = init_synthetic(&real, &budget, 3).unwrap();
        let cfg = ExpertTrainConfig {
            lr: 0.05,
            batch_size: 8,
            seed: 7,
        };
        let buffer = buffer_trajectories(&real, &spec, 2, 5, &cfg).unwrap();
        (real, syn, buffer)
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (real, mut syn, buffer) = mtt_setup(41);
        let before = syn.latents().clone();
        let cfg = MTTConfig {
            iterations: 0,
            max_start_epoch: 2,
            student_steps: 2,
            ..Default::default()
        };
        let (trace, eta) = distill_mtt(&real, &mut syn, &buffer, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(eta, cfg.eta_model_init);
        assert_eq!(syn.latents(), &before);
    }

    #[test]
    fn zero_student_steps_pins_loss_at_one() {
        let (real, mut syn, buffer) = mtt_setup(42);
        let cfg = MTTConfig {
            iterations: 5,
            max_start_epoch: 2,
            expert_epochs: 1,
            student_steps: 0,
            eta_base: 1.0,
            ..Default::default()
        };
        let (trace, eta) = distill_mtt(&real, &mut syn, &buffer, &cfg).unwrap();
        for r in &trace {
            assert!((r.loss - 1.0).abs() < 1e-5, "loss {}", r.loss);
        }
        assert_eq!(eta, cfg.eta_model_init);
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let (_, mut syn, buffer) = mtt_setup(43);
        let other = tiny_latent_set(77);
        let cfg = MTTConfig {
            iterations: 1,
            max_start_epoch: 2,
            student_steps: 1,
            ..Default::default()
        };
        assert!(matches!(
            distill_mtt(&other, &mut syn, &buffer, &cfg),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn buffer_is_never_written() {
        let (real, mut syn, buffer) = mtt_setup(44);
        let before: Vec<Vec<Array1<f32>>> = buffer.experts.clone();
        let cfg = MTTConfig {
            iterations: 3,
            max_start_epoch: 2,
            student_steps: 2,
            eta_base: 0.5,
            batch_size: 4,
            ..Default::default()
        };
        distill_mtt(&real, &mut syn, &buffer, &cfg).unwrap();
        assert_eq!(buffer.experts, before);
    }

    #[test]
    fn eta_model_stays_positive() {
        let (real, mut syn, buffer) = mtt_setup(45);
        let cfg = MTTConfig {
            iterations: 20,
            max_start_epoch: 2,
            student_steps: 3,
            eta_base: 0.5,
            eta_model_init: 1e-7,
            lr_lr: 1e-2, // aggressive, to push eta toward the floor
            batch_size: 4,
            ..Default::default()
        };
        let (trace, eta) = distill_mtt(&real, &mut syn, &buffer, &cfg).unwrap();
        assert!(eta >= ETA_MODEL_FLOOR);
        for r in trace {
            assert!(r.model_lr.unwrap() >= ETA_MODEL_FLOOR);
        }
    }

    #[test]
    fn matching_loss_decreases_on_toy_run() {
        let (real, mut syn, buffer) = mtt_setup(46);
        let cfg = MTTConfig {
            iterations: 200,
            max_start_epoch: 2,
            expert_epochs: 1,
            student_steps: 10,
            eta_base: 1.0,
            eta_model_init: 0.05,
            lr_lr: 1e-4,
            batch_size: 6,
            seed: 5,
            ..Default::default()
        };
        let (trace, _) = distill_mtt(&real, &mut syn, &buffer, &cfg).unwrap();
        let losses: Vec<f32> = trace.iter().map(|r| r.loss).collect();
        let q = losses.len() / 4;
        let mean = |xs: &[f32]| xs.iter().sum::<f32>() / xs.len() as f32;
        let first = mean(&losses[..q]);
        let last = mean(&losses[losses.len() - q..]);
        assert!(last < first, "mean loss did not drop: {first} -> {last}");
    }

    #[test]
    fn unrolled_gradient_matches_fd_on_scalar_quadratic() {
        // Hand-built "network": theta is a scalar, the training loss on a
        // synthetic value s is q(theta) = 0.5 * (theta * s - 1)^2. Two
        // recorded gradient steps, then the normalized matching loss.
        let (theta0, target, eta, s0) = (0.4f32, 0.9f32, 0.25f32, 0.7f32);
        let run = |s0: f32| -> (f32, f32) {
            let g = Graph::new();
            let s = g.constant(ndarray::arr0(s0).into_dyn());
            let mut theta = g.constant(ndarray::arr0(theta0).into_dyn());
            for _ in 0..2 {
                let residual = g.add_scalar(g.mul(theta, s), -1.0);
                let q = g.scale(g.square(residual), 0.5);
                let dq = g.grad(q, &[theta])[0].unwrap();
                theta = g.sub(theta, g.scale(dq, eta));
            }
            let tv = g.constant(ndarray::arr0(target).into_dyn());
            let den = (theta0 - target) * (theta0 - target);
            let loss = g.scale(g.square(g.sub(theta, tv)), 1.0 / den);
            let lv = g.scalar_value(loss);
            let gs = g.grad(loss, &[s])[0].map(|v| g.scalar_value(v)).unwrap_or(0.0);
            (lv, gs)
        };
        let (_, analytic) = run(s0);
        let eps = 1e-2f32;
        let fd = (run(s0 + eps).0 - run(s0 - eps).0) / (2.0 * eps);
        let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        assert!(rel < 1e-3, "rel err {rel} (analytic {analytic}, fd {fd})");
    }

    #[test]
    fn mtt_syn_gradient_matches_fd_through_unroll() {
        // Full path on a small conv net: N=2 student steps, gradient w.r.t.
        // one synthetic latent entry by central differences. The evaluation
        // point must keep every ReLU input away from zero at both unrolled
        // steps, otherwise finite differences straddle a kink.
        let mut picked = None;
        'outer: for seed in 47..120u64 {
            let (real, syn, buffer) = mtt_setup(seed);
            let spec = buffer.spec;
            let start = &buffer.experts[0][0];
            // Two fixed rows (one per class) keep the kink-free search
            // tractable; untouched rows carry zero gradient either way.
            let rows: Vec<usize> = vec![0, 3];
            let g = Graph::new();
            let syn_leaf = g.constant(syn.latents().clone().into_dyn());
            let snet = ConvNet::unflatten_params(start, &spec).unwrap();
            let mut theta: Vec<Var> =
                snet.params.iter().map(|p| g.constant(p.clone())).collect();
            for _ in 0..2 {
                let x = g.take_rows(syn_leaf, Rc::new(rows.clone()));
                if crate::networks::relu_margin(&g, &spec, &theta, x) < 0.006 {
                    continue 'outer;
                }
                let batch_labels: Vec<u32> =
                    rows.iter().map(|&i| syn.labels()[i]).collect();
                let l = g.cross_entropy(forward(&g, &spec, &theta, x), Rc::new(batch_labels));
                let grads = g.grad(l, &theta);
                theta = theta
                    .iter()
                    .zip(grads)
                    .map(|(&t, gr)| match gr {
                        Some(gr) => g.sub(t, g.scale(gr, 0.05)),
                        None => t,
                    })
                    .collect();
            }
            picked = Some((real, syn, buffer));
            break;
        }
        let (_real, syn, buffer) = picked.expect("no kink-free setup found");
        let spec = buffer.spec;
        let start = &buffer.experts[0][0];
        let target = &buffer.experts[0][1];
        let den: f64 = start
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let rows: Vec<usize> = vec![0, 3];
        let labels: Vec<u32> = rows.iter().map(|&i| syn.labels()[i]).collect();
        let eta = 0.05f32;

        let eval = |arr: &Array4<f32>, want_grad: bool| -> (f32, Option<ndarray::ArrayD<f32>>) {
            let g = Graph::new();
            let syn_leaf = g.constant(arr.clone().into_dyn());
            let eta_leaf = g.constant(ndarray::arr0(eta).into_dyn());
            let snet = ConvNet::unflatten_params(start, &spec).unwrap();
            let mut theta: Vec<Var> =
                snet.params.iter().map(|p| g.constant(p.clone())).collect();
            for _ in 0..2 {
                let x = g.take_rows(syn_leaf, Rc::new(rows.clone()));
                let l = g.cross_entropy(
                    forward(&g, &spec, &theta, x),
                    Rc::new(labels.clone()),
                );
                let grads = g.grad(l, &theta);
                theta = theta
                    .iter()
                    .zip(grads)
                    .map(|(&t, gr)| match gr {
                        Some(gr) => g.sub(t, g.scale_v(gr, eta_leaf)),
                        None => t,
                    })
                    .collect();
            }
            let tnet = ConvNet::unflatten_params(target, &spec).unwrap();
            let mut dist: Option<Var> = None;
            for (t, tgt) in theta.iter().zip(&tnet.params) {
                let tv = g.constant(tgt.clone());
                let term = g.sum_sq(g.sub(*t, tv));
                dist = Some(match dist {
                    Some(d) => g.add(d, term),
                    None => term,
                });
            }
            let loss = g.scale(dist.unwrap(), (1.0 / den) as f32);
            let lv = g.scalar_value(loss);
            let grad = if want_grad {
                Some(g.grad_arrays(loss, &[syn_leaf]).remove(0))
            } else {
                None
            };
            (lv, grad)
        };

        let base = syn.latents().clone();
        let (_, grad) = eval(&base, true);
        let analytic = grad.unwrap();

        // Finite differences over the touched rows, compared at norm level.
        let eps = 5e-3f32;
        let mut num = ndarray::ArrayD::<f32>::zeros(analytic.raw_dim());
        for &row in &rows {
            for y in 0..4 {
                for x in 0..4 {
                    let mut p = base.clone();
                    let mut m = base.clone();
                    p[[row, 0, y, x]] += eps;
                    m[[row, 0, y, x]] -= eps;
                    num[[row, 0, y, x]] =
                        (eval(&p, false).0 - eval(&m, false).0) / (2.0 * eps);
                }
            }
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let denom = num
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(analytic.mapv(|v| v * v).sum().sqrt());
        assert!(
            diff / denom < 1e-3,
            "relative error {} too large",
            diff / denom
        );
    }
}
