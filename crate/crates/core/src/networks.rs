//! Classifier / embedding networks used during distillation (on latents)
//! and evaluation (on pixels).
//!
//! A ConvNet of depth `d` is `d` blocks of [3x3 conv, pad 1 -> instance
//! norm -> ReLU -> 2x average pool] followed by one linear layer. Parameter
//! flattening order is fixed: per block `conv_w, conv_b, norm_gamma,
//! norm_beta`, then `fc_w, fc_b`, each in row-major element order.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub depth: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_hw: (usize, usize),
    pub width: usize,
}

impl ConvNetSpec {
    pub fn new(
        depth: usize,
        in_channels: usize,
        num_classes: usize,
        input_hw: (usize, usize),
        width: usize,
    ) -> Result<Self> {
        let spec = Self {
            depth,
            in_channels,
            num_classes,
            input_hw,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArgument("depth must be >= 1".into()));
        }
        let min = 1usize << self.depth;
        if self.input_hw.0 < min || self.input_hw.1 < min {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} too small for depth {} (needs >= {min})",
                self.input_hw.0, self.input_hw.1, self.depth
            )));
        }
        Ok(())
    }

    /// Spatial size of the feature map entering the linear head.
    pub fn feature_hw(&self) -> (usize, usize) {
        (
            self.input_hw.0 >> self.depth,
            self.input_hw.1 >> self.depth,
        )
    }

    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.feature_hw();
        self.width * h * w
    }

    /// Parameter shapes in flattening order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut cin = self.in_channels;
        for b in 0..self.depth {
            shapes.push((format!("block{b}.conv_w"), vec![self.width, cin, 3, 3]));
            shapes.push((format!("block{b}.conv_b"), vec![self.width]));
            shapes.push((format!("block{b}.norm_gamma"), vec![self.width]));
            shapes.push((format!("block{b}.norm_beta"), vec![self.width]));
            cin = self.width;
        }
        shapes.push(("fc.w".into(), vec![self.num_classes, self.feature_dim()]));
        shapes.push(("fc.b".into(), vec![self.num_classes]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Distribution that network parameters are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitDistribution {
    pub scheme: InitScheme,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases;
    /// ones for normalization scales, zeros for offsets.
    FanInUniform,
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    /// Values in flattening order; shapes follow `spec.param_shapes()`.
    pub params: Vec<ArrayD<f32>>,
}

/// Construct a ConvNet with parameters drawn per `init`.
pub fn build_convnet(spec: &ConvNetSpec, init: &InitDistribution) -> Result<ConvNet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let mut params: Vec<ArrayD<f32>> = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let arr = match init.scheme {
            InitScheme::FanInUniform => {
                if name.ends_with("norm_gamma") {
                    ArrayD::from_elem(IxDyn(&shape), 1.0)
                } else if name.ends_with("norm_beta") {
                    ArrayD::zeros(IxDyn(&shape))
                } else if name.ends_with("conv_w") {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                    let bound = 1.0 / fan_in.sqrt();
                    ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-bound..bound))
                } else if name.ends_with("fc.w") || name.ends_with("fc_w") {
                    let fan_in = shape[1] as f32;
                    let bound = 1.0 / fan_in.sqrt();
                    ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-bound..bound))
                } else {
                    // Biases: fan-in of the layer they belong to.
                    let fan_in = if name.contains("conv_b") {
                        // conv bias fan-in: preceding conv's input patch
                        (params[params.len() - 1].shape()[1] * 9) as f32
                    } else {
                        spec.feature_dim() as f32
                    };
                    let bound = 1.0 / fan_in.sqrt();
                    ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-bound..bound))
                }
            }
        };
        params.push(arr);
    }
    Ok(ConvNet { spec: *spec, params })
}

impl ConvNet {
    /// Lift parameters onto a graph as leaves, in flattening order.
    pub fn lift(&self, g: &Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    /// Single flat parameter vector in the documented order.
    pub fn flatten_params(&self) -> Array1<f32> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for p in &self.params {
            out.extend(p.iter().copied());
        }
        Array1::from_vec(out)
    }

    /// Rebuild parameter arrays from a flat vector.
    pub fn unflatten_params(flat: &Array1<f32>, spec: &ConvNetSpec) -> Result<ConvNet> {
        if flat.len() != spec.param_count() {
            return Err(Error::ParamLength {
                expected: spec.param_count(),
                got: flat.len(),
            });
        }
        let mut params = Vec::new();
        let mut offset = 0;
        let slice = flat.as_slice().expect("contiguous flat params");
        for (_, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), slice[offset..offset + n].to_vec())
                .expect("param reshape");
            params.push(arr);
            offset += n;
        }
        Ok(ConvNet { spec: *spec, params })
    }

    /// Overwrite parameters in place from graph values.
    pub fn set_from_graph(&mut self, g: &Graph, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            *p = g.value(*v).as_ref().clone();
        }
    }
}

/// Forward pass producing logits (batch, num_classes).
///
/// `params` may be leaves (plain training) or derived vars (unrolled
/// student steps); gradients flow either way.
pub fn forward(g: &Graph, spec: &ConvNetSpec, params: &[Var], x: Var) -> Var {
    let feats = forward_features(g, spec, params, x);
    let fc_w = params[4 * spec.depth];
    let fc_b = params[4 * spec.depth + 1];
    let n = g.shape(feats)[0];
    g.add(
        g.matmul(feats, g.transpose2(fc_w)),
        g.bcast_rows(fc_b, n),
    )
}

/// Forward pass up to (and including) flattening of the last feature map.
/// This is the embedding used by distribution matching.
pub fn forward_features(g: &Graph, spec: &ConvNetSpec, params: &[Var], x: Var) -> Var {
    forward_impl(g, spec, params, x, None)
}

fn forward_impl(
    g: &Graph,
    spec: &ConvNetSpec,
    params: &[Var],
    x: Var,
    mut margin: Option<&mut f32>,
) -> Var {
    assert_eq!(
        params.len(),
        4 * spec.depth + 2,
        "parameter list does not match spec"
    );
    let mut cur = x;
    for b in 0..spec.depth {
        let conv_w = params[4 * b];
        let conv_b = params[4 * b + 1];
        let gamma = params[4 * b + 2];
        let beta = params[4 * b + 3];
        cur = g.conv2d(cur, conv_w, 1);
        let sh = g.shape(cur);
        let (n, h, w) = (sh[0], sh[2], sh[3]);
        cur = g.add(cur, g.bcast_c(conv_b, n, h, w));
        cur = instance_norm(g, cur, gamma, beta);
        if let Some(m) = margin.as_deref_mut() {
            for v in g.value(cur).iter() {
                *m = m.min(v.abs());
            }
        }
        cur = g.relu(cur);
        cur = g.avg_pool2(cur);
    }
    let sh = g.shape(cur);
    g.reshape(cur, &[sh[0], sh[1] * sh[2] * sh[3]])
}

/// Smallest |pre-activation| seen across all blocks for this input.
///
/// Finite-difference gradient checks are only valid at points where no
/// ReLU input sits near zero; use this margin to pick such a point.
pub fn relu_margin(g: &Graph, spec: &ConvNetSpec, params: &[Var], x: Var) -> f32 {
    let mut margin = f32::INFINITY;
    let _ = forward_impl(g, spec, params, x, Some(&mut margin));
    margin
}

/// Affine instance normalization over spatial dims, built from primitives
/// so it stays differentiable to any order.
fn instance_norm(g: &Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let sh = g.shape(x);
    let (n, h, w) = (sh[0], sh[2], sh[3]);
    let inv_hw = 1.0 / (h * w) as f32;
    let mu = g.scale(g.sum_hw(x), inv_hw);
    let xc = g.sub(x, g.bcast_hw(mu, h, w));
    let var = g.scale(g.sum_hw(g.square(xc)), inv_hw);
    let inv_std = g.recip(g.sqrt(g.add_scalar(var, NORM_EPS)));
    let normed = g.mul(xc, g.bcast_hw(inv_std, h, w));
    g.add(
        g.mul(normed, g.bcast_c(gamma, n, h, w)),
        g.bcast_c(beta, n, h, w),
    )
}

/// Produces freshly initialized networks of one architecture. Distillation
/// loops draw a new network per iteration with a per-iteration salt.
#[derive(Debug, Clone)]
pub struct NetFactory {
    pub spec: ConvNetSpec,
    pub init: InitDistribution,
}

impl NetFactory {
    pub fn new(spec: ConvNetSpec, seed: u64) -> Self {
        Self {
            spec,
            init: InitDistribution {
                scheme: InitScheme::FanInUniform,
                seed,
            },
        }
    }

    pub fn build(&self, salt: u64) -> Result<ConvNet> {
        let seed = self
            .init
            .seed
            .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        build_convnet(
            &self.spec,
            &InitDistribution {
                scheme: self.init.scheme,
                seed,
            },
        )
    }
}

/// Which space a classifier runs in; latent networks are shallower by
/// log2(effective_f).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Pixel,
    Latent,
}

/// Depth schedule: pixel depth is round(log2(res)) - 2 (256 -> 6, 512 -> 7);
/// latent depth subtracts log2(effective_f).
pub fn depth_for_resolution(res: usize, space: Space, effective_f: u32) -> Result<usize> {
    if res < 4 {
        return Err(Error::InvalidArgument(format!(
            "resolution {res} below the supported range"
        )));
    }
    let pixel_depth = (res as f64).log2().round() as i64 - 2;
    let depth = match space {
        Space::Pixel => pixel_depth,
        Space::Latent => {
            if !effective_f.is_power_of_two() {
                return Err(Error::InvalidArgument(format!(
                    "effective factor {effective_f} must be a power of two"
                )));
            }
            pixel_depth - effective_f.trailing_zeros() as i64
        }
    };
    if depth < 1 {
        return Err(Error::InvalidArgument(format!(
            "resolution {res} too small for a depth-{depth} network in {space:?} space"
        )));
    }
    let d = depth as usize;
    let input = match space {
        Space::Pixel => res,
        Space::Latent => res / effective_f as usize,
    };
    if input < (1usize << d) {
        return Err(Error::InvalidArgument(format!(
            "input size {input} below 2^{d}"
        )));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use std::rc::Rc;

    fn small_spec() -> ConvNetSpec {
        ConvNetSpec::new(3, 3, 10, (32, 32), 16).unwrap()
    }

    #[test]
    fn depth_schedule_matches_published_table() {
        assert_eq!(depth_for_resolution(256, Space::Pixel, 1).unwrap(), 6);
        assert_eq!(depth_for_resolution(256, Space::Latent, 4).unwrap(), 4);
        assert_eq!(depth_for_resolution(512, Space::Latent, 8).unwrap(), 4);
        assert_eq!(depth_for_resolution(512, Space::Pixel, 1).unwrap(), 7);
        assert_eq!(depth_for_resolution(32, Space::Pixel, 1).unwrap(), 3);
        assert_eq!(depth_for_resolution(32, Space::Latent, 4).unwrap(), 1);
        assert!(depth_for_resolution(8, Space::Latent, 8).is_err());
    }

    #[test]
    fn feature_map_shape_before_linear() {
        // depth 3 on 32x32: 32 / 2^3 = 4.
        let spec = ConvNetSpec::new(3, 3, 10, (32, 32), 128).unwrap();
        assert_eq!(spec.feature_hw(), (4, 4));
        assert_eq!(spec.feature_dim(), 128 * 4 * 4);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = small_spec();
        let init = InitDistribution {
            scheme: InitScheme::FanInUniform,
            seed: 5,
        };
        let a = build_convnet(&spec, &init).unwrap();
        let b = build_convnet(&spec, &init).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let c = build_convnet(
            &spec,
            &InitDistribution {
                scheme: InitScheme::FanInUniform,
                seed: 6,
            },
        )
        .unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn forward_logits_shape() {
        let spec = ConvNetSpec::new(2, 4, 7, (8, 8), 8).unwrap();
        let net = build_convnet(
            &spec,
            &InitDistribution {
                scheme: InitScheme::FanInUniform,
                seed: 0,
            },
        )
        .unwrap();
        let g = Graph::new();
        let x = g.constant(Array4::<f32>::from_elem((5, 4, 8, 8), 0.3).into_dyn());
        let params = net.lift(&g);
        let logits = forward(&g, &spec, &params, x);
        assert_eq!(g.shape(logits), vec![5, 7]);
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let spec = small_spec();
        let net = build_convnet(
            &spec,
            &InitDistribution {
                scheme: InitScheme::FanInUniform,
                seed: 9,
            },
        )
        .unwrap();
        let flat = net.flatten_params();
        let re = ConvNet::unflatten_params(&flat, &spec).unwrap();
        assert_eq!(re.flatten_params(), flat);
        // Norm is zero between identical vectors.
        let d = (&re.flatten_params() - &flat).mapv(|x| x * x).sum();
        assert_eq!(d, 0.0);

        let bad = Array1::<f32>::zeros(flat.len() + 1);
        assert!(matches!(
            ConvNet::unflatten_params(&bad, &spec),
            Err(Error::ParamLength { .. })
        ));
    }

    #[test]
    fn single_weight_perturbation_moves_one_coordinate() {
        let spec = ConvNetSpec::new(1, 2, 3, (4, 4), 4).unwrap();
        let init = InitDistribution {
            scheme: InitScheme::FanInUniform,
            seed: 2,
        };
        let mut net = build_convnet(&spec, &init).unwrap();
        let before = net.flatten_params();
        net.params[0][[1, 0, 2, 1]] += 1e-3;
        let after = net.flatten_params();
        let changed = before
            .iter()
            .zip(after.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(ConvNetSpec::new(4, 3, 10, (8, 8), 16).is_err());
        assert!(ConvNetSpec::new(3, 3, 10, (8, 8), 16).is_ok());
    }

    #[test]
    fn accepts_pixel_and_latent_channel_counts() {
        for (cin, hw) in [(3usize, 32usize), (4, 8)] {
            let depth = if hw == 32 { 3 } else { 1 };
            let spec = ConvNetSpec::new(depth, cin, 10, (hw, hw), 8).unwrap();
            let net = build_convnet(
                &spec,
                &InitDistribution {
                    scheme: InitScheme::FanInUniform,
                    seed: 1,
                },
            )
            .unwrap();
            let g = Graph::new();
            let x = g.constant(Array4::<f32>::from_elem((2, cin, hw, hw), 0.1).into_dyn());
            let params = net.lift(&g);
            assert_eq!(g.shape(forward(&g, &spec, &params, x)), vec![2, 10]);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_toy() {
        // Two linearly separable classes; a few SGD steps must cut the loss.
        let spec = ConvNetSpec::new(1, 1, 2, (4, 4), 4).unwrap();
        let mut net = build_convnet(
            &spec,
            &InitDistribution {
                scheme: InitScheme::FanInUniform,
                seed: 3,
            },
        )
        .unwrap();
        let mut x = Array4::<f32>::zeros((8, 1, 4, 4));
        let mut labels = Vec::new();
        for i in 0..8 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            x.index_axis_mut(ndarray::Axis(0), i).fill(sign);
            labels.push((i % 2) as u32);
        }
        let labels = Rc::new(labels);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..30 {
            let g = Graph::new();
            let params = net.lift(&g);
            let xv = g.constant(x.clone().into_dyn());
            let loss = g.cross_entropy(forward(&g, &spec, &params, xv), Rc::clone(&labels));
            last = g.scalar_value(loss);
            first.get_or_insert(last);
            let grads = g.grad_arrays(loss, &params);
            for (p, gr) in net.params.iter_mut().zip(grads) {
                *p -= &gr.mapv(|v| v * 0.1);
            }
        }
        assert!(
            last < first.unwrap() * 0.5,
            "loss did not drop: {} -> {last}",
            first.unwrap()
        );
    }
}
