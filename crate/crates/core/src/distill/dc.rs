//! Gradient-matching distillation.
//!
//! Each outer loop matches per-class cross-entropy gradients of one model
//! on real versus synthetic latents, descends the synthetic codes on the
//! summed distance, then trains the model for a few steps on *real* latents
//! only. Works identically in pixel space (identity codec) and latent space.

use super::{sample_indices, LossTrace, TraceRecord};
use crate::autodiff::{Graph, Var};
use crate::data::{LatentDataset, SyntheticLatentSet};
use crate::error::{Error, Result};
use crate::networks::{forward, NetFactory};
use crate::optim::Sgd;
use ndarray::{Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// Synthetic-code optimizer momentum, the convention of the gradient
/// matching lineage.
const SYN_MOMENTUM: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Mse,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DCConfig {
    /// Distillation iterations T, each with a fresh random model.
    pub iterations: usize,
    /// Outer loops M per iteration.
    pub outer_loops: usize,
    /// Model training steps N on real latents after each outer loop.
    pub inner_steps: usize,
    /// Learning rate per latent code; the synthetic set descends at
    /// eta_base * lpc.
    pub eta_base: f32,
    /// Model learning rate for the inner steps (bare SGD).
    pub eta_model: f32,
    pub batch_size: usize,
    pub match_loss: MatchKind,
    pub seed: u64,
}

impl Default for DCConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            outer_loops: 10,
            inner_steps: 50,
            eta_base: 0.05,
            eta_model: 0.01,
            batch_size: 64,
            match_loss: MatchKind::Mse,
            seed: 0,
        }
    }
}

impl DCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_loops == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "outer_loops and batch_size must be positive".into(),
            ));
        }
        if self.eta_base <= 0.0 || self.eta_model <= 0.0 {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Distance between two per-layer gradient lists.
///
/// `mse` sums squared differences over all layers. `cosine` sums
/// per-output-row cosine distances, treating rank-0/1 tensors as a single
/// row; a row with a zero-norm gradient on either side contributes 0.
pub fn gradient_match_loss(
    g: &Graph,
    grads_syn: &[Var],
    grads_real: &[Var],
    kind: MatchKind,
) -> Result<Var> {
    if grads_syn.len() != grads_real.len() {
        return Err(Error::GradStructure(format!(
            "{} layers vs {}",
            grads_syn.len(),
            grads_real.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&gs, &gr) in grads_syn.iter().zip(grads_real) {
        let (ss, sr) = (g.shape(gs), g.shape(gr));
        if ss != sr {
            return Err(Error::GradStructure(format!(
                "layer shape {ss:?} vs {sr:?}"
            )));
        }
        let term = match kind {
            MatchKind::Mse => g.sum_sq(g.sub(gs, gr)),
            MatchKind::Cosine => cosine_layer(g, gs, gr, &ss),
        };
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.ok_or_else(|| Error::GradStructure("empty gradient lists".into()))
}

fn cosine_layer(g: &Graph, gs: Var, gr: Var, shape: &[usize]) -> Var {
    let (rows, cols) = if shape.len() >= 2 {
        (shape[0], shape[1..].iter().product::<usize>())
    } else {
        (1, shape.iter().product::<usize>().max(1))
    };
    let s2 = g.reshape(gs, &[rows, cols]);
    let r2 = g.reshape(gr, &[rows, cols]);
    let dots = g.sum_cols(g.mul(s2, r2));
    let ss = g.sum_cols(g.square(s2));
    let rr = g.sum_cols(g.square(r2));

    // Row mask: zero-norm gradients on either side are uninformative and
    // contribute exactly 0. The (1 - mask) offset keeps masked rows
    // numerically benign inside sqrt/recip.
    let (vss, vrr) = (g.value(ss), g.value(rr));
    let mut mask = Array2::<f32>::zeros((rows, 1));
    let mut off = Array2::<f32>::zeros((rows, 1));
    for i in 0..rows {
        if vss[[i, 0]] > 0.0 && vrr[[i, 0]] > 0.0 {
            mask[[i, 0]] = 1.0;
        } else {
            off[[i, 0]] = 1.0;
        }
    }
    let mask = g.constant(mask.into_dyn());
    let off = g.constant(off.into_dyn());

    let ns = g.sqrt(g.add(ss, off));
    let nr = g.sqrt(g.add(rr, off));
    let denom = g.add_scalar(g.mul(ns, nr), 1e-12);
    let ones = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[rows, 1]), 1.0));
    g.sum_all(g.mul(mask, g.sub(ones, g.div(dots, denom))))
}

/// Batch plan for the model's inner training steps. Indices always come
/// from the real dataset; synthetic items never enter model training.
pub(crate) fn plan_inner_batches(
    real_len: usize,
    steps: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..real_len).collect();
    (0..steps)
        .map(|_| sample_indices(&all, batch_size.min(real_len), rng))
        .collect()
}

/// Run gradient-matching distillation, mutating `syn` in place.
///
/// Returns the per-outer-loop matching-loss trace.
pub fn distill_dc(
    real: &LatentDataset,
    syn: &mut SyntheticLatentSet,
    cfg: &DCConfig,
    factory: &NetFactory,
) -> Result<LossTrace> {
    cfg.validate()?;
    if real.num_classes != syn.num_classes {
        return Err(Error::InvalidArgument(format!(
            "real set has {} classes, synthetic set {}",
            real.num_classes, syn.num_classes
        )));
    }
    for (c, idx) in real.class_index.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass { class: c });
        }
    }

    let lpc = syn.budget.lpc;
    let eta_syn = cfg.eta_base * lpc as f32;
    let mut opt = Sgd::new(eta_syn, SYN_MOMENTUM);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations * cfg.outer_loops);

    for iter in 0..cfg.iterations {
        let mut net = factory.build(iter as u64)?;
        for outer in 0..cfg.outer_loops {
            // --- matching step ---
            let g = Graph::new();
            let syn_leaf = g.constant(syn.latents().clone().into_dyn());
            let params = net.lift(&g);
            let mut loss_match: Option<Var> = None;

            for c in 0..real.num_classes {
                let real_idx = sample_indices(
                    &real.class_index[c],
                    cfg.batch_size.min(real.class_index[c].len()),
                    &mut rng,
                );
                let syn_rows: Vec<usize> = syn.class_rows(c).collect();
                let syn_idx = sample_indices(&syn_rows, cfg.batch_size.min(lpc), &mut rng);

                // Real gradients are targets: computed in a throwaway graph
                // and imported as constants.
                let real_grads =
                    class_param_grads(&net, real, &real_idx, c as u32)?;
                let real_vars: Vec<Var> =
                    real_grads.into_iter().map(|a| g.constant(a)).collect();

                let x_syn = g.take_rows(syn_leaf, Rc::new(syn_idx.clone()));
                let labels = Rc::new(vec![c as u32; syn_idx.len()]);
                let loss_syn = g.cross_entropy(forward(&g, &factory.spec, &params, x_syn), labels);
                let syn_grads: Vec<Var> = g
                    .grad(loss_syn, &params)
                    .into_iter()
                    .zip(&params)
                    .map(|(gr, p)| gr.unwrap_or_else(|| g.constant(ArrayD::zeros(g.shape(*p)))))
                    .collect();

                let term = gradient_match_loss(&g, &syn_grads, &real_vars, cfg.match_loss)?;
                loss_match = Some(match loss_match {
                    Some(t) => g.add(t, term),
                    None => term,
                });
            }

            let loss_match = loss_match.expect("at least one class");
            let loss_value = g.scalar_value(loss_match);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iter });
            }
            trace.push(TraceRecord {
                iteration: iter,
                outer,
                loss: loss_value,
                model_lr: None,
            });

            let syn_grad = g.grad(loss_match, &[syn_leaf])[0];
            if let Some(sg) = syn_grad {
                let grad = g.value(sg).as_ref().clone();
                let mut param_list = [syn.latents().clone().into_dyn()];
                opt.step(&mut param_list, &[grad]);
                let updated = param_list[0]
                    .clone()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("syn rank 4");
                syn.latents_mut().assign(&updated);
            }
            drop(g);

            // --- model inner steps on real latents only (never synthetic) ---
            let batches = plan_inner_batches(real.len(), cfg.inner_steps, cfg.batch_size, &mut rng);
            for batch in &batches {
                train_step(&mut net, real, batch, cfg.eta_model)?;
            }
        }
    }
    Ok(trace)
}

/// Per-class parameter gradients of the cross-entropy loss on real latents,
/// as plain arrays (detached targets).
fn class_param_grads(
    net: &crate::networks::ConvNet,
    real: &LatentDataset,
    idx: &[usize],
    class: u32,
) -> Result<Vec<ArrayD<f32>>> {
    let g = Graph::new();
    let params = net.lift(&g);
    let x = g.constant(gather4(&real.latents, idx).into_dyn());
    let labels = Rc::new(vec![class; idx.len()]);
    let loss = g.cross_entropy(forward(&g, &net.spec, &params, x), labels);
    Ok(g.grad_arrays(loss, &params))
}

fn train_step(
    net: &mut crate::networks::ConvNet,
    real: &LatentDataset,
    idx: &[usize],
    lr: f32,
) -> Result<()> {
    let g = Graph::new();
    let params = net.lift(&g);
    let x = g.constant(gather4(&real.latents, idx).into_dyn());
    let labels = Rc::new(idx.iter().map(|&i| real.labels[i]).collect::<Vec<u32>>());
    let loss = g.cross_entropy(forward(&g, &net.spec, &params, x), labels);
    if !g.scalar_value(loss).is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let grads = g.grad_arrays(loss, &params);
    for (p, gr) in net.params.iter_mut().zip(grads) {
        p.zip_mut_with(&gr, |pv, gv| *pv -= lr * gv);
    }
    Ok(())
}

pub(crate) fn gather4(items: &ndarray::Array4<f32>, idx: &[usize]) -> ndarray::Array4<f32> {
    let (_, c, h, w) = items.dim();
    let mut out = ndarray::Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&items.index_axis(Axis(0), i));
    }
    out
}
