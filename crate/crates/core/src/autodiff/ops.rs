//! Primitive tape operations.
//!
//! Shape contracts are enforced with assertions: a mismatch is a programming
//! error in this crate, not a user-facing condition. Each backward closure
//! emits tape ops only, which keeps every gradient differentiable in turn.

use super::{Graph, Var};
use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use std::rc::Rc;

impl Graph {
    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va.as_ref() + vb.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Rc::new(|_g: &Graph, ct: Var| vec![Some(ct), Some(ct)])),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va.as_ref() - vb.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Rc::new(|g: &Graph, ct: Var| {
                vec![Some(ct), Some(g.neg(ct))]
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va.as_ref() * vb.as_ref();
        self.push(
            out,
            vec![a, b],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.mul(ct, b)), Some(g.mul(ct, a))]
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x);
        self.push(
            out,
            vec![a],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.neg(ct))])),
        )
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.scale(ct, c))]
            })),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f32) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(
            out,
            vec![a],
            Some(Rc::new(|_g: &Graph, ct: Var| vec![Some(ct)])),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.scale(g.mul(ct, a), 2.0))]
            })),
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f32::sqrt);
        let y = self.push(out, vec![a], None);
        self.set_backward(
            y,
            Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.mul(ct, g.scale(g.recip(y), 0.5)))]
            }),
        );
        y
    }

    pub fn recip(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / x);
        let z = self.push(out, vec![a], None);
        self.set_backward(
            z,
            Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.neg(g.mul(ct, g.square(z))))]
            }),
        );
        z
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f32::exp);
        let y = self.push(out, vec![a], None);
        self.set_backward(
            y,
            Rc::new(move |g: &Graph, ct: Var| vec![Some(g.mul(ct, y))]),
        );
        y
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).mapv(f32::ln);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.mul(ct, g.recip(a)))]
            })),
        )
    }

    /// ReLU. The activation mask is captured as a constant: the second
    /// derivative of ReLU is zero almost everywhere.
    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let mask = self.constant(va.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.mul(ct, mask))]
            })),
        )
    }

    /// Elementwise division a / b.
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.mul(a, self.recip(b))
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn scale_v(&self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.len(), 1, "scale_v: scalar operand expected");
        let sv = *vs.iter().next().unwrap();
        let out = va.mapv(|x| x * sv);
        self.push(
            out,
            vec![a, s],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.scale_v(ct, s)), Some(g.sum_all(g.mul(ct, a)))]
            })),
        )
    }

    // ---- reductions and broadcasts ----

    /// Sum of all elements; result is a 0-d node.
    pub fn sum_all(&self, a: Var) -> Var {
        let out = ndarray::arr0(self.value(a).sum()).into_dyn();
        let shape = self.shape(a);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.fill(ct, &shape))]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f32;
        self.scale(self.sum_all(a), 1.0 / n)
    }

    /// Broadcast a 0-d node to `shape`.
    pub fn fill(&self, s: Var, shape: &[usize]) -> Var {
        let vs = self.value(s);
        assert_eq!(vs.len(), 1, "fill: scalar operand expected");
        let sv = *vs.iter().next().unwrap();
        let out = ArrayD::from_elem(IxDyn(shape), sv);
        self.push(
            out,
            vec![s],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.sum_all(ct))])),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let orig: Vec<usize> = va.shape().to_vec();
        let out = va
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.reshape(ct, &orig))]
            })),
        )
    }

    // ---- matrices ----

    pub fn transpose2(&self, a: Var) -> Var {
        let va = self.value(a);
        let m = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose2: rank-2 expected");
        let out = m.t().to_owned().into_dyn();
        self.push(
            out,
            vec![a],
            Some(Rc::new(|g: &Graph, ct: Var| {
                vec![Some(g.transpose2(ct))]
            })),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let ma = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: lhs rank-2 expected");
        let mb = vb
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: rhs rank-2 expected");
        assert_eq!(ma.ncols(), mb.nrows(), "matmul: inner dims mismatch");
        let out = ma.dot(&mb).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![
                    Some(g.matmul(ct, g.transpose2(b))),
                    Some(g.matmul(g.transpose2(a), ct)),
                ]
            })),
        )
    }

    // ---- row selection / scatter (axis 0) ----

    /// Gather rows along axis 0. Duplicate indices are allowed.
    pub fn take_rows(&self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let n = va.shape()[0];
        let mut out_shape = va.shape().to_vec();
        out_shape[0] = idx.len();
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        for (row, &i) in idx.iter().enumerate() {
            assert!(i < n, "take_rows: index out of range");
            out.index_axis_mut(Axis(0), row)
                .assign(&va.index_axis(Axis(0), i));
        }
        let idx_bw = Rc::clone(&idx);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.scatter_rows(ct, Rc::clone(&idx_bw), n))]
            })),
        )
    }

    /// Scatter-add rows along axis 0 into a zero array with `n` rows.
    pub fn scatter_rows(&self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape()[0], idx.len(), "scatter_rows: row count mismatch");
        let mut out_shape = va.shape().to_vec();
        out_shape[0] = n;
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        for (row, &i) in idx.iter().enumerate() {
            let src = va.index_axis(Axis(0), row);
            let mut dst = out.index_axis_mut(Axis(0), i);
            dst += &src;
        }
        let idx_bw = Rc::clone(&idx);
        self.push(
            out,
            vec![a],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.take_rows(ct, Rc::clone(&idx_bw)))]
            })),
        )
    }

    // ---- NCHW spatial ops ----

    /// 2x2 average pooling, stride 2. Spatial dims must be even.
    pub fn avg_pool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("avg_pool2: rank-4 expected");
        let (n, c, h, w) = a.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let src = a.to_slice().expect("avg_pool2: contiguous input");
        let mut out = ndarray::Array4::<f32>::zeros((n, c, h / 2, w / 2));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            let (h2, w2) = (h / 2, w / 2);
            for (plane_idx, plane) in src.chunks_exact(h * w).enumerate() {
                let oplane = &mut dst[plane_idx * h2 * w2..][..h2 * w2];
                for i in 0..h2 {
                    let r0 = &plane[2 * i * w..][..w];
                    let r1 = &plane[(2 * i + 1) * w..][..w];
                    let orow = &mut oplane[i * w2..][..w2];
                    for j in 0..w2 {
                        orow[j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * 0.25;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| {
                vec![Some(g.scale(g.upsample2(ct), 0.25))]
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample2: rank-4 expected");
        let (n, c, h, w) = a.dim();
        let src = a.to_slice().expect("upsample2: contiguous input");
        let mut out = ndarray::Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            let (h2, w2) = (2 * h, 2 * w);
            for (plane_idx, plane) in src.chunks_exact(h * w).enumerate() {
                let oplane = &mut dst[plane_idx * h2 * w2..][..h2 * w2];
                for i in 0..h {
                    let row = &plane[i * w..][..w];
                    let (top, bottom) = oplane[2 * i * w2..][..2 * w2].split_at_mut(w2);
                    for j in 0..w {
                        let v = row[j];
                        top[2 * j] = v;
                        top[2 * j + 1] = v;
                        bottom[2 * j] = v;
                        bottom[2 * j + 1] = v;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| {
                vec![Some(g.scale(g.avg_pool2(ct), 4.0))]
            })),
        )
    }

    /// Per-(item, channel) spatial sum: NCHW -> (N, C, 1, 1).
    pub fn sum_hw(&self, x: Var) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("sum_hw: rank-4 expected");
        let (n, c, h, w) = a.dim();
        let src = a.to_slice().expect("sum_hw: contiguous input");
        let mut out = ndarray::Array4::<f32>::zeros((n, c, 1, 1));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for (plane_idx, plane) in src.chunks_exact(h * w).enumerate() {
                dst[plane_idx] = plane.iter().sum();
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.bcast_hw(ct, h, w))]
            })),
        )
    }

    /// Broadcast (N, C, 1, 1) over spatial dims -> (N, C, H, W).
    pub fn bcast_hw(&self, x: Var, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("bcast_hw: rank-4 expected");
        let (n, c, oh, ow) = a.dim();
        assert_eq!((oh, ow), (1, 1), "bcast_hw: source must be (N,C,1,1)");
        let src = a.to_slice().expect("bcast_hw: contiguous input");
        let mut out = ndarray::Array4::<f32>::zeros((n, c, h, w));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for (plane_idx, chunk) in dst.chunks_exact_mut(h * w).enumerate() {
                chunk.fill(src[plane_idx]);
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.sum_hw(ct))])),
        )
    }

    /// Sum over items and spatial dims: NCHW -> (C,). Bias gradient shape.
    pub fn sum_nhw(&self, x: Var) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix4>()
            .expect("sum_nhw: rank-4 expected");
        let (n, c, h, w) = a.dim();
        let src = a.to_slice().expect("sum_nhw: contiguous input");
        let mut out = ndarray::Array1::<f32>::zeros(c);
        for (plane_idx, plane) in src.chunks_exact(h * w).enumerate() {
            out[plane_idx % c] += plane.iter().sum::<f32>();
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.bcast_c(ct, n, h, w))]
            })),
        )
    }

    /// Broadcast (C,) across items and spatial dims -> (N, C, H, W).
    pub fn bcast_c(&self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bcast_c: rank-1 expected");
        let c = a.len();
        let mut out = ndarray::Array4::<f32>::zeros((n, c, h, w));
        {
            let dst = out.as_slice_mut().expect("contiguous");
            for (plane_idx, chunk) in dst.chunks_exact_mut(h * w).enumerate() {
                chunk.fill(a[plane_idx % c]);
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.sum_nhw(ct))])),
        )
    }

    // ---- (B, K) matrix reductions ----

    /// Row sums: (B, K) -> (B, 1).
    pub fn sum_cols(&self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sum_cols: rank-2 expected");
        let k = m.ncols();
        let out = m.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
        self.push(
            out,
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.bcast_cols(ct, k))]
            })),
        )
    }

    /// Broadcast (B, 1) -> (B, K).
    pub fn bcast_cols(&self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let m = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("bcast_cols: rank-2 expected");
        assert_eq!(m.ncols(), 1, "bcast_cols: source must be (B,1)");
        let b = m.nrows();
        let col = m.index_axis(Axis(1), 0);
        let out = col
            .insert_axis(Axis(1))
            .broadcast((b, k))
            .expect("bcast_cols")
            .to_owned();
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.sum_cols(ct))])),
        )
    }

    /// Column sums: (B, K) -> (K,).
    pub fn sum_axis0(&self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sum_axis0: rank-2 expected");
        let b = m.nrows();
        let out = m.sum_axis(Axis(0)).into_dyn();
        self.push(
            out,
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.bcast_rows(ct, b))]
            })),
        )
    }

    /// Broadcast (K,) -> (B, K).
    pub fn bcast_rows(&self, x: Var, b: usize) -> Var {
        let vx = self.value(x);
        let a = vx
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bcast_rows: rank-1 expected");
        let k = a.len();
        let out = a
            .insert_axis(Axis(0))
            .broadcast((b, k))
            .expect("bcast_rows")
            .to_owned();
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(|g: &Graph, ct: Var| vec![Some(g.sum_axis0(ct))])),
        )
    }

    /// Pick one logit per row: (B, K) with labels -> (B, 1).
    pub fn pick_class(&self, x: Var, labels: Rc<Vec<u32>>) -> Var {
        let vx = self.value(x);
        let m = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("pick_class: rank-2 expected");
        let (b, k) = m.dim();
        assert_eq!(b, labels.len(), "pick_class: label count mismatch");
        let mut out = ndarray::Array2::<f32>::zeros((b, 1));
        for i in 0..b {
            out[[i, 0]] = m[[i, labels[i] as usize]];
        }
        let labels_bw = Rc::clone(&labels);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.scatter_class(ct, Rc::clone(&labels_bw), k))]
            })),
        )
    }

    /// Spread (B, 1) into one-hot positions of a (B, K) matrix.
    pub fn scatter_class(&self, x: Var, labels: Rc<Vec<u32>>, k: usize) -> Var {
        let vx = self.value(x);
        let m = vx
            .view()
            .into_dimensionality::<Ix2>()
            .expect("scatter_class: rank-2 expected");
        let b = m.nrows();
        assert_eq!(b, labels.len(), "scatter_class: label count mismatch");
        let mut out = ndarray::Array2::<f32>::zeros((b, k));
        for i in 0..b {
            out[[i, labels[i] as usize]] = m[[i, 0]];
        }
        let labels_bw = Rc::clone(&labels);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![Some(g.pick_class(ct, Rc::clone(&labels_bw)))]
            })),
        )
    }

    // ---- composites used throughout ----

    /// Sum of squared elements, as a 0-d node.
    pub fn sum_sq(&self, a: Var) -> Var {
        self.sum_all(self.square(a))
    }

    /// Mean cross-entropy of logits (B, K) against integer labels.
    ///
    /// Built from primitives (shift by a detached row max, exp, log) so the
    /// loss is differentiable to any order.
    pub fn cross_entropy(&self, logits: Var, labels: Rc<Vec<u32>>) -> Var {
        let vz = self.value(logits);
        let m = vz
            .view()
            .into_dimensionality::<Ix2>()
            .expect("cross_entropy: rank-2 logits expected");
        let (b, k) = m.dim();
        assert_eq!(b, labels.len(), "cross_entropy: label count mismatch");
        // Stability shift: constant w.r.t. differentiation, exact for the value.
        let mut mx = ndarray::Array2::<f32>::zeros((b, 1));
        for i in 0..b {
            let row_max = m.row(i).iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            mx[[i, 0]] = row_max;
        }
        let shift = self.constant(mx.into_dyn());
        let zs = self.sub(logits, self.bcast_cols(shift, k));
        let lse = self.add(self.ln(self.sum_cols(self.exp(zs))), shift);
        let picked = self.pick_class(logits, labels);
        self.mean_all(self.sub(lse, picked))
    }

    fn set_backward(&self, v: Var, bw: Rc<super::BackwardFn>) {
        self.nodes.borrow_mut()[v.0].backward = Some(bw);
    }
}
