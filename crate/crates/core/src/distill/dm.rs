//! Distribution-matching distillation: no bi-level loop.
//!
//! Every iteration draws a fresh randomly initialized embedding network,
//! sums squared distances between per-class mean embeddings of real and
//! synthetic latents, and takes one synthetic descent step. Network
//! parameters are never trained.

use super::{sample_indices, LossTrace, TraceRecord};
use crate::autodiff::{Graph, Var};
use crate::data::{LatentDataset, SyntheticLatentSet};
use crate::error::{Error, Result};
use crate::networks::{forward_features, ConvNetSpec, NetFactory};
use crate::optim::Sgd;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

const SYN_MOMENTUM: f32 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DMConfig {
    pub iterations: usize,
    /// Learning rate per latent code; the set descends at eta_base * lpc.
    pub eta_base: f32,
    pub batch_size: usize,
    /// Depth of the probe network; None follows the latent depth schedule
    /// the caller baked into the factory spec.
    pub embed_depth: Option<usize>,
    pub seed: u64,
}

impl Default for DMConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            eta_base: 0.5,
            batch_size: 64,
            embed_depth: None,
            seed: 0,
        }
    }
}

impl DMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.eta_base <= 0.0 {
            return Err(Error::InvalidArgument("eta_base must be positive".into()));
        }
        Ok(())
    }
}

/// Squared distance between mean embeddings: the empirical MMD estimate for
/// one class.
pub fn mmd_class_loss(
    g: &Graph,
    spec: &ConvNetSpec,
    params: &[Var],
    real_batch: Var,
    syn_batch: Var,
) -> Result<Var> {
    if g.shape(real_batch)[0] == 0 || g.shape(syn_batch)[0] == 0 {
        return Err(Error::InvalidArgument("empty batch in mmd_class_loss".into()));
    }
    let er = forward_features(g, spec, params, real_batch);
    let es = forward_features(g, spec, params, syn_batch);
    Ok(mmd_from_embeddings(g, er, es))
}

/// MMD estimate from precomputed embeddings (rows are items).
pub fn mmd_from_embeddings(g: &Graph, emb_real: Var, emb_syn: Var) -> Var {
    let nr = g.shape(emb_real)[0] as f32;
    let ns = g.shape(emb_syn)[0] as f32;
    let mr = g.scale(g.sum_axis0(emb_real), 1.0 / nr);
    let ms = g.scale(g.sum_axis0(emb_syn), 1.0 / ns);
    g.sum_sq(g.sub(mr, ms))
}

/// Run distribution matching, mutating `syn` in place.
pub fn distill_dm(
    real: &LatentDataset,
    syn: &mut SyntheticLatentSet,
    cfg: &DMConfig,
    factory: &NetFactory,
) -> Result<LossTrace> {
    cfg.validate()?;
    if real.num_classes != syn.num_classes {
        return Err(Error::InvalidArgument(format!(
            "real set has {} classes, synthetic set {}",
            real.num_classes, syn.num_classes
        )));
    }
    let mut spec = factory.spec;
    if let Some(d) = cfg.embed_depth {
        spec = ConvNetSpec::new(d, spec.in_channels, spec.num_classes, spec.input_hw, spec.width)?;
    }
    let probe_factory = NetFactory {
        spec,
        init: factory.init,
    };

    let lpc = syn.budget.lpc;
    let mut opt = Sgd::new(cfg.eta_base * lpc as f32, SYN_MOMENTUM);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for iter in 0..cfg.iterations {
        let (loss_value, grad) = dm_iteration(real, syn, cfg, &probe_factory, iter, &mut rng)?;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        trace.push(TraceRecord {
            iteration: iter,
            outer: 0,
            loss: loss_value,
            model_lr: None,
        });
        let mut param_list = [syn.latents().clone().into_dyn()];
        opt.step(&mut param_list, &[grad]);
        let updated = param_list[0]
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("syn rank 4");
        syn.latents_mut().assign(&updated);
    }
    Ok(trace)
}

/// One matching iteration: fresh probe network, summed per-class MMD, and
/// the gradient w.r.t. the synthetic latents. The probe's parameters are
/// used read-only.
pub(crate) fn dm_iteration(
    real: &LatentDataset,
    syn: &SyntheticLatentSet,
    cfg: &DMConfig,
    factory: &NetFactory,
    iter: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f32, ndarray::ArrayD<f32>)> {
    let net = factory.build(iter as u64)?;
    let g = Graph::new();
    let syn_leaf = g.constant(syn.latents().clone().into_dyn());
    let params = net.lift(&g);
    let mut loss: Option<Var> = None;
    for c in 0..real.num_classes {
        let real_idx = sample_indices(
            &real.class_index[c],
            cfg.batch_size.min(real.class_index[c].len()),
            rng,
        );
        let syn_rows: Vec<usize> = syn.class_rows(c).collect();
        let syn_idx = sample_indices(&syn_rows, cfg.batch_size.min(syn_rows.len()), rng);

        let xr = g.constant(super::dc::gather4(&real.latents, &real_idx).into_dyn());
        let xs = g.take_rows(syn_leaf, Rc::new(syn_idx));
        let term = mmd_class_loss(&g, &net.spec, &params, xr, xs)?;
        loss = Some(match loss {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let loss = loss.expect("at least one class");
    let loss_value = g.scalar_value(loss);
    let grad = g.grad_arrays(loss, &[syn_leaf]).remove(0);
    Ok((loss_value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_synthetic, BudgetSpec, SyntheticMeta};
    use crate::networks::ConvNetSpec;
    use ndarray::{arr2, Array4, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_batches_give_zero() {
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        let net = NetFactory::new(spec, 3).build(0).unwrap();
        let g = Graph::new();
        let params = net.lift(&g);
        let x = g.constant(Array4::<f32>::from_elem((3, 1, 4, 4), 0.7).into_dyn());
        let loss = mmd_class_loss(&g, &spec, &params, x, x).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-6);
    }

    #[test]
    fn identity_embedding_mean_arithmetic() {
        // real embeddings mean (2, 0); single synthetic item (2, 2) -> 4.
        let g = Graph::new();
        let er = g.constant(arr2(&[[3.0f32, -1.0], [1.0, 1.0]]).into_dyn());
        let es = g.constant(arr2(&[[2.0f32, 2.0]]).into_dyn());
        let loss = mmd_from_embeddings(&g, er, es);
        assert!((g.scalar_value(loss) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn squared_norm_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let b: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let base = {
            let g = Graph::new();
            let er = g.constant(ndarray::Array2::from_shape_vec((2, 3), a.clone()).unwrap().into_dyn());
            let es = g.constant(ndarray::Array2::from_shape_vec((1, 3), b.clone()).unwrap().into_dyn());
            g.scalar_value(mmd_from_embeddings(&g, er, es))
        };
        for s in [0.5f32, 3.0] {
            let g = Graph::new();
            let sa: Vec<f32> = a.iter().map(|v| v * s).collect();
            let sb: Vec<f32> = b.iter().map(|v| v * s).collect();
            let er = g.constant(ndarray::Array2::from_shape_vec((2, 3), sa).unwrap().into_dyn());
            let es = g.constant(ndarray::Array2::from_shape_vec((1, 3), sb).unwrap().into_dyn());
            let scaled = g.scalar_value(mmd_from_embeddings(&g, er, es));
            assert!(
                (scaled - s * s * base).abs() < 1e-4 * (1.0 + scaled.abs()),
                "{scaled} vs {}",
                s * s * base
            );
        }
    }

    #[test]
    fn permutation_invariance_within_batches() {
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        let net = NetFactory::new(spec, 5).build(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array4::<f32>::from_shape_fn((4, 1, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let y = Array4::<f32>::from_shape_fn((3, 1, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let mut xp = x.clone();
        // Swap rows 0 and 3.
        let r0 = x.index_axis(Axis(0), 0).to_owned();
        let r3 = x.index_axis(Axis(0), 3).to_owned();
        xp.index_axis_mut(Axis(0), 0).assign(&r3);
        xp.index_axis_mut(Axis(0), 3).assign(&r0);

        let eval = |xr: &Array4<f32>| {
            let g = Graph::new();
            let params = net.lift(&g);
            let a = g.constant(xr.clone().into_dyn());
            let b = g.constant(y.clone().into_dyn());
            g.scalar_value(mmd_class_loss(&g, &spec, &params, a, b).unwrap())
        };
        assert!((eval(&x) - eval(&xp)).abs() < 1e-5);
    }

    #[test]
    fn empty_batch_rejected() {
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        let net = NetFactory::new(spec, 3).build(0).unwrap();
        let g = Graph::new();
        let params = net.lift(&g);
        let x = g.constant(Array4::<f32>::zeros((0, 1, 4, 4)).into_dyn());
        let y = g.constant(Array4::<f32>::zeros((2, 1, 4, 4)).into_dyn());
        assert!(mmd_class_loss(&g, &spec, &params, x, y).is_err());
    }

    fn blob_problem() -> (LatentDataset, SyntheticLatentSet, NetFactory) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let count = 40;
        let mut latents = Array4::<f32>::zeros((count, 1, 4, 4));
        let mut labels = Vec::new();
        for i in 0..count {
            let class = i % 2;
            let center = if class == 0 { 0.8 } else { -0.8 };
            latents
                .index_axis_mut(Axis(0), i)
                .mapv_inplace(|_| center + rng.gen_range(-0.5f32..0.5));
            labels.push(class as u32);
        }
        let real = LatentDataset::new(latents, labels, 2, 2, 1, "toy".into()).unwrap();
        let budget = BudgetSpec::new(1, 1, 1).unwrap();
        let syn = init_synthetic(&real, &budget, 13).unwrap();
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        (real, syn, NetFactory::new(spec, 23))
    }

    #[test]
    fn zero_iterations_is_identity() {
        let (real, mut syn, factory) = blob_problem();
        let before = syn.latents().clone();
        let cfg = DMConfig {
            iterations: 0,
            ..Default::default()
        };
        let trace = distill_dm(&real, &mut syn, &cfg, &factory).unwrap();
        assert!(trace.is_empty());
        assert_eq!(syn.latents(), &before);
    }

    #[test]
    fn exact_copies_with_full_batches_start_at_zero_loss() {
        // Synthetic set = every real item of each class (class size == lpc)
        // with full-batch sampling: empirical means coincide.
        let mut latents = Array4::<f32>::zeros((6, 1, 4, 4));
        for i in 0..6 {
            latents.index_axis_mut(Axis(0), i).fill(i as f32 * 0.3 - 1.0);
        }
        let labels = vec![0, 0, 0, 1, 1, 1];
        let real = LatentDataset::new(latents.clone(), labels.clone(), 2, 2, 1, "x".into()).unwrap();
        let budget = BudgetSpec::new(1, 1, 1).unwrap();
        assert_eq!(budget.lpc, 3);
        // Build the synthetic set as exact per-class copies.
        let syn = SyntheticLatentSet::from_parts(
            latents,
            labels,
            budget,
            2,
            SyntheticMeta {
                seed: 0,
                algorithm: crate::data::Algorithm::Init,
                iterations: 0,
            },
        )
        .unwrap();
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        let factory = NetFactory::new(spec, 2);
        let cfg = DMConfig {
            iterations: 1,
            batch_size: 16, // covers the full class on both sides
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (loss, _) = dm_iteration(&real, &syn, &cfg, &factory, 0, &mut rng).unwrap();
        assert!(loss.abs() < 1e-8, "loss {loss}");
    }

    #[test]
    fn probe_network_params_never_updated() {
        let (real, syn, factory) = blob_problem();
        let cfg = DMConfig {
            iterations: 1,
            batch_size: 8,
            ..Default::default()
        };
        let net = factory.build(0).unwrap();
        let hash_before: Vec<f32> = net.flatten_params().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let _ = dm_iteration(&real, &syn, &cfg, &factory, 0, &mut rng).unwrap();
        // The factory rebuilds deterministically: identical parameters prove
        // the iteration took none of its own.
        let net_after = factory.build(0).unwrap();
        assert_eq!(net_after.flatten_params().to_vec(), hash_before);
    }

    #[test]
    fn embedding_means_approach_real_means() {
        let (real, mut syn, factory) = blob_problem();
        let cfg = DMConfig {
            iterations: 120,
            eta_base: 0.4,
            batch_size: 20,
            embed_depth: None,
            seed: 3,
        };
        // Probe distance under a fixed held-out embedding network.
        let probe = factory.build(999).unwrap();
        let dist = |syn: &SyntheticLatentSet| {
            let g = Graph::new();
            let params = probe.lift(&g);
            let mut total = 0.0f32;
            for c in 0..2 {
                let xr = g.constant(
                    super::super::dc::gather4(&real.latents, &real.class_index[c]).into_dyn(),
                );
                let rows: Vec<usize> = syn.class_rows(c).collect();
                let xs = g.constant(super::super::dc::gather4(syn.latents(), &rows).into_dyn());
                let l = mmd_class_loss(&g, &probe.spec, &params, xr, xs).unwrap();
                total += g.scalar_value(l);
            }
            total
        };
        let before = dist(&syn);
        distill_dm(&real, &mut syn, &cfg, &factory).unwrap();
        let after = dist(&syn);
        assert!(after < before, "probe distance did not drop: {before} -> {after}");
    }

    #[test]
    fn dm_gradient_matches_finite_differences() {
        let (real, syn, factory) = blob_problem();
        let cfg = DMConfig {
            iterations: 1,
            batch_size: 6,
            ..Default::default()
        };
        let loss_of = |arr: &Array4<f32>| {
            let mut s = syn.clone();
            s.latents_mut().assign(arr);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            dm_iteration(&real, &s, &cfg, &factory, 0, &mut rng).unwrap().0
        };
        let base = syn.latents().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, analytic) = dm_iteration(&real, &syn, &cfg, &factory, 0, &mut rng).unwrap();

        let eps = 2e-2f32;
        let mut num = ndarray::ArrayD::<f32>::zeros(analytic.raw_dim());
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p.as_slice_mut().unwrap()[i] += eps;
            m.as_slice_mut().unwrap()[i] -= eps;
            num.as_slice_mut().unwrap()[i] = (loss_of(&p) - loss_of(&m)) / (2.0 * eps);
        }
        let diff = (&analytic - &num).mapv(|v| v * v).sum().sqrt();
        let denom = num
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(analytic.mapv(|v| v * v).sum().sqrt());
        assert!(diff / denom < 1e-3, "relative error {}", diff / denom);
    }
}
