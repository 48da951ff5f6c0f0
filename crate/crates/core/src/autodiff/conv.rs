//! Stride-1 2D convolution and its two adjoints as tape operations.
//!
//! The three kernels (forward, input-gradient, weight-gradient) are each
//! bilinear and close under differentiation: every backward is expressed in
//! terms of the other two, so arbitrarily nested gradients work.
//!
//! Convolutions are computed item by item with a transposed im2col buffer
//! (C*k*k, H*W): patch rows copy as contiguous runs and the GEMM output has
//! the same layout as the NCHW item, so no transpose passes are needed.
//! Per-item results are independent of batch size, which the encoder cache
//! relies on for bit-stable output; large batches fan items out to workers
//! without reordering any floating-point sums.

use super::{Graph, Var};
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Ix4};
use rayon::prelude::*;
use std::rc::Rc;

/// Below this many multiply-accumulates a convolution runs sequentially;
/// worker dispatch costs more than it saves on tiny latent-space batches.
const PAR_MAC_THRESHOLD: usize = 8_000_000;

fn conv_macs(n: usize, cin: usize, cout: usize, hw: usize, k: usize) -> usize {
    n * cin * cout * hw * k * k
}

/// (C, H, W) slice -> (C*k*k, Ho*Wo) patch matrix.
fn im2col_t(x: &[f32], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array2<f32> {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
    let cols_slice = cols.as_slice_mut().expect("cols contiguous");
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &mut cols_slice[(ci * k * k + u * k + v) * ho * wo..][..ho * wo];
                for i in 0..ho {
                    let yi = i + u;
                    if yi < pad || yi >= h + pad {
                        continue;
                    }
                    let sy = yi - pad;
                    let j0 = pad.saturating_sub(v);
                    let j1 = wo.min(w + pad - v);
                    if j1 > j0 {
                        let src0 = sy * w + (j0 + v - pad);
                        row[i * wo + j0..i * wo + j1]
                            .copy_from_slice(&plane[src0..src0 + (j1 - j0)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_t`]: scatter-add the patch matrix back into a
/// (C, H, W) slice.
fn col2im_t(cols: &Array2<f32>, x: &mut [f32], c: usize, h: usize, w: usize, k: usize, pad: usize) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let cols_slice = cols.as_slice().expect("cols contiguous");
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for u in 0..k {
            for v in 0..k {
                let row = &cols_slice[(ci * k * k + u * k + v) * ho * wo..][..ho * wo];
                for i in 0..ho {
                    let yi = i + u;
                    if yi < pad || yi >= h + pad {
                        continue;
                    }
                    let sy = yi - pad;
                    let j0 = pad.saturating_sub(v);
                    let j1 = wo.min(w + pad - v);
                    if j1 > j0 {
                        let dst0 = sy * w + (j0 + v - pad);
                        for (d, s) in plane[dst0..dst0 + (j1 - j0)]
                            .iter_mut()
                            .zip(&row[i * wo + j0..i * wo + j1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn item_slice(x: ArrayView4<'_, f32>, i: usize) -> &'_ [f32] {
    let len: usize = x.shape()[1..].iter().product();
    let slice = x.to_slice().expect("batch contiguous");
    &slice[i * len..(i + 1) * len]
}

/// y[n,o,i,j] = sum_{c,u,v} x[n,c,i+u-p,j+v-p] * w[o,c,u,v]
pub fn conv_fwd_raw(x: ArrayView4<f32>, w: ArrayView4<f32>, pad: usize) -> Array4<f32> {
    let (n, cin, h, wd) = x.dim();
    let (cout, wcin, k, k2) = w.dim();
    assert_eq!(cin, wcin, "conv: channel mismatch");
    assert_eq!(k, k2, "conv: square kernels only");
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let wmat = w
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv: weight reshape");
    let item = |i: usize| -> Array2<f32> {
        let cols = im2col_t(item_slice(x, i), cin, h, wd, k, pad);
        wmat.dot(&cols) // (Cout, Ho*Wo), the item's NCHW layout
    };
    let mut y = Array4::<f32>::zeros((n, cout, ho, wo));
    write_items(&mut y, conv_macs(n, cin, cout, ho * wo, k), item);
    y
}

/// gx[n,c,a,b] = sum_{o,u,v} gy[n,o,a-u+p,b-v+p] * w[o,c,u,v]
pub fn conv_input_grad_raw(gy: ArrayView4<f32>, w: ArrayView4<f32>, pad: usize) -> Array4<f32> {
    let (n, cout, ho, wo) = gy.dim();
    let (wcout, cin, k, _) = w.dim();
    assert_eq!(cout, wcout, "conv input grad: channel mismatch");
    let h = ho + k - 1 - 2 * pad;
    let wd = wo + k - 1 - 2 * pad;
    let wmat = w
        .into_shape_with_order((cout, cin * k * k))
        .expect("conv: weight reshape");
    let run = |i: usize, out: &mut [f32]| {
        let gym = gy_mat(gy, i, cout, ho * wo);
        let colsg = wmat.t().dot(&gym); // (C*k*k, Ho*Wo)
        col2im_t(&colsg, out, cin, h, wd, k, pad);
    };
    let mut gx = Array4::<f32>::zeros((n, cin, h, wd));
    let item_len = cin * h * wd;
    let gx_slice = gx.as_slice_mut().expect("gx contiguous");
    if conv_macs(n, cin, cout, ho * wo, k) >= PAR_MAC_THRESHOLD {
        gx_slice
            .par_chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, chunk)| run(i, chunk));
    } else {
        for (i, chunk) in gx_slice.chunks_mut(item_len).enumerate() {
            run(i, chunk);
        }
    }
    gx
}

/// gw[o,c,u,v] = sum_{n,i,j} gy[n,o,i,j] * x[n,c,i+u-p,j+v-p]
pub fn conv_weight_grad_raw(x: ArrayView4<f32>, gy: ArrayView4<f32>, pad: usize) -> Array4<f32> {
    let (n, cin, h, wd) = x.dim();
    let (gn, cout, ho, wo) = gy.dim();
    assert_eq!(n, gn, "conv weight grad: item count mismatch");
    let k = h + 2 * pad + 1 - ho;
    let mut gw_mat = Array2::<f32>::zeros((cout, cin * k * k));
    if conv_macs(n, cin, cout, ho * wo, k) >= PAR_MAC_THRESHOLD {
        let partials: Vec<Array2<f32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col_t(item_slice(x, i), cin, h, wd, k, pad);
                gy_mat(gy, i, cout, ho * wo).dot(&cols.t())
            })
            .collect();
        for p in partials {
            gw_mat += &p;
        }
    } else {
        for i in 0..n {
            let cols = im2col_t(item_slice(x, i), cin, h, wd, k, pad);
            general_mat_mul(
                1.0,
                &gy_mat(gy, i, cout, ho * wo),
                &cols.t(),
                1.0,
                &mut gw_mat.view_mut(),
            );
        }
    }
    gw_mat
        .into_shape_with_order((cout, cin, k, k))
        .expect("conv: gw reshape")
}

fn gy_mat(gy: ArrayView4<'_, f32>, i: usize, cout: usize, hw: usize) -> ArrayView2<'_, f32> {
    let len = cout * hw;
    let slice = gy.to_slice().expect("gy contiguous");
    ArrayView2::from_shape((cout, hw), &slice[i * len..(i + 1) * len]).expect("gy view")
}

/// Compute per-item (Cout, HW) blocks into the output batch, in parallel
/// above the MAC threshold. Item order never affects the values.
fn write_items(
    y: &mut Array4<f32>,
    macs: usize,
    item: impl Fn(usize) -> Array2<f32> + Sync,
) {
    let item_len: usize = y.shape()[1..].iter().product();
    let y_slice = y.as_slice_mut().expect("y contiguous");
    let copy_out = |chunk: &mut [f32], block: Array2<f32>| {
        chunk.copy_from_slice(block.as_slice().expect("block contiguous"));
    };
    if macs >= PAR_MAC_THRESHOLD {
        y_slice
            .par_chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, chunk)| copy_out(chunk, item(i)));
    } else {
        for (i, chunk) in y_slice.chunks_mut(item_len).enumerate() {
            copy_out(chunk, item(i));
        }
    }
}

impl Graph {
    /// Stride-1 convolution with symmetric zero padding.
    pub fn conv2d(&self, x: Var, w: Var, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let out = conv_fwd_raw(
            vx.view().into_dimensionality::<Ix4>().expect("conv2d: x rank 4"),
            vw.view().into_dimensionality::<Ix4>().expect("conv2d: w rank 4"),
            pad,
        );
        self.push(
            out.into_dyn(),
            vec![x, w],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![
                    Some(g.conv2d_input_grad(ct, w, pad)),
                    Some(g.conv2d_weight_grad(x, ct, pad)),
                ]
            })),
        )
    }

    /// Adjoint of [`Graph::conv2d`] in its first argument.
    pub fn conv2d_input_grad(&self, gy: Var, w: Var, pad: usize) -> Var {
        let (vgy, vw) = (self.value(gy), self.value(w));
        let out = conv_input_grad_raw(
            vgy.view().into_dimensionality::<Ix4>().expect("rank 4"),
            vw.view().into_dimensionality::<Ix4>().expect("rank 4"),
            pad,
        );
        self.push(
            out.into_dyn(),
            vec![gy, w],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![
                    Some(g.conv2d(ct, w, pad)),
                    Some(g.conv2d_weight_grad(ct, gy, pad)),
                ]
            })),
        )
    }

    /// Adjoint of [`Graph::conv2d`] in its second argument.
    pub fn conv2d_weight_grad(&self, x: Var, gy: Var, pad: usize) -> Var {
        let (vx, vgy) = (self.value(x), self.value(gy));
        let out = conv_weight_grad_raw(
            vx.view().into_dimensionality::<Ix4>().expect("rank 4"),
            vgy.view().into_dimensionality::<Ix4>().expect("rank 4"),
            pad,
        );
        self.push(
            out.into_dyn(),
            vec![x, gy],
            Some(Rc::new(move |g: &Graph, ct: Var| {
                vec![
                    Some(g.conv2d_input_grad(gy, ct, pad)),
                    Some(g.conv2d(x, ct, pad)),
                ]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transposed_im2col_matches_direct_patch_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, k, pad) = (2usize, 5usize, 4usize, 3usize, 1usize);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let cols = im2col_t(&x, c, h, w, k, pad);
        let (ho, wo) = (h, w);
        for ci in 0..c {
            for u in 0..k {
                for v in 0..k {
                    for i in 0..ho {
                        for j in 0..wo {
                            let yi = i as i64 + u as i64 - pad as i64;
                            let yj = j as i64 + v as i64 - pad as i64;
                            let expect = if yi >= 0 && yi < h as i64 && yj >= 0 && yj < w as i64 {
                                x[ci * h * w + yi as usize * w + yj as usize]
                            } else {
                                0.0
                            };
                            assert_eq!(cols[[ci * k * k + u * k + v, i * wo + j]], expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w, k, pad) = (2usize, 6usize, 5usize, 3usize, 1usize);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let cols = im2col_t(&x, c, h, w, k, pad);
        let y = Array2::from_shape_fn(cols.dim(), |_| rng.gen_range(-1.0f32..1.0));
        // <im2col(x), y> == <x, col2im(y)>
        let lhs: f32 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0f32; c * h * w];
        col2im_t(&y, &mut back, c, h, w, k, pad);
        let rhs: f32 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn parallel_and_sequential_paths_agree() {
        // Force both paths by scaling the batch; values must be identical.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Array4::from_shape_fn((16, 8, 3, 3), |_| rng.gen_range(-0.5f32..0.5));
        let big = Array4::from_shape_fn((96, 8, 16, 16), |_| rng.gen_range(-1.0f32..1.0));
        assert!(conv_macs(96, 8, 16, 256, 3) >= PAR_MAC_THRESHOLD);
        let y_big = conv_fwd_raw(big.view(), w.view(), 1);
        let one = big.slice(ndarray::s![..1, .., .., ..]);
        let y_one = conv_fwd_raw(one, w.view(), 1);
        assert_eq!(
            y_big.slice(ndarray::s![..1, .., .., ..]),
            y_one.view()
        );
    }
}
