//! 2-D convolution kernels used by the autodiff graph.
//!
//! Forward and backward passes lower each sample to an im2col matrix and run
//! dense GEMMs on it. Work is split per sample (per fixed-size sample chunk
//! for weight gradients) so the batch dimension parallelizes; partial results
//! are always combined in sample order, keeping outputs bit-identical across
//! execution modes.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

use crate::parallel::{map_chunks, map_indexed, ExecMode};

/// Samples per weight-gradient partial sum.
const GRAD_CHUNK: usize = 8;

/// Output spatial size for one axis.
pub fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gathers conv windows of one `[C, H, W]` sample into `[Ho*Wo, C*kh*kw]`.
fn im2col(
    x: ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let mut cols = Array2::zeros((ho * wo, c * kh * kw));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            let mut col = 0;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = base_y + ky as isize;
                    for kx in 0..kw {
                        let ix = base_x + kx as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            cols[[row, col]] = x[[ci, iy as usize, ix as usize]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Scatters `[Ho*Wo, C*kh*kw]` window gradients back onto a `[C, H, W]` grid.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let mut out = Array3::zeros((c, h, w));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            let mut col = 0;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = base_y + ky as isize;
                    for kx in 0..kw {
                        let ix = base_x + kx as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            out[[ci, iy as usize, ix as usize]] += cols[[row, col]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

fn weight_matrix(w: ArrayView4<'_, f64>) -> Array2<f64> {
    let (co, ci, kh, kw) = w.dim();
    w.to_owned()
        .into_shape_with_order((co, ci * kh * kw))
        .expect("conv weights are contiguous")
}

/// `y[b] = w * im2col(x[b]) (+ bias)`, output `[B, Cout, Ho, Wo]`.
pub fn conv2d_forward(
    x: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
    mode: ExecMode,
) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (co, ci, kh, kw) = w.dim();
    assert_eq!(c, ci, "input channels must match kernel");
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wd, kw, stride, pad);
    let w_flat = weight_matrix(w);

    let per_sample = map_indexed(mode, b, |i| {
        let cols = im2col(x.index_axis(Axis(0), i), kh, kw, stride, pad);
        let mut out = w_flat.dot(&cols.t()); // [Cout, Ho*Wo]
        if let Some(bias) = bias {
            for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        out.into_shape_with_order((co, ho, wo))
            .expect("gemm output is contiguous")
    });

    let mut y = Array4::zeros((b, co, ho, wo));
    for (i, sample) in per_sample.into_iter().enumerate() {
        y.index_axis_mut(Axis(0), i).assign(&sample);
    }
    y
}

/// Gradient with respect to the conv input.
pub fn conv2d_backward_data(
    dy: ArrayView4<'_, f64>,
    w: ArrayView4<'_, f64>,
    input_dims: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    mode: ExecMode,
) -> Array4<f64> {
    let (b, c, h, wd) = input_dims;
    let (co, _ci, kh, kw) = w.dim();
    let (ho, wo) = (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad));
    let w_flat = weight_matrix(w);

    let per_sample = map_indexed(mode, b, |i| {
        let dy_flat = dy
            .index_axis(Axis(0), i)
            .to_owned()
            .into_shape_with_order((co, ho * wo))
            .expect("grad slice is contiguous");
        let dcols = dy_flat.t().dot(&w_flat); // [Ho*Wo, C*kh*kw]
        col2im(&dcols, c, h, wd, kh, kw, stride, pad)
    });

    let mut dx = Array4::zeros((b, c, h, wd));
    for (i, sample) in per_sample.into_iter().enumerate() {
        dx.index_axis_mut(Axis(0), i).assign(&sample);
    }
    dx
}

/// Gradients with respect to the kernel and bias.
///
/// Per-chunk partial sums are folded in chunk order, so the reduction order
/// is fixed regardless of how the chunks were scheduled.
pub fn conv2d_backward_weights(
    dy: ArrayView4<'_, f64>,
    x: ArrayView4<'_, f64>,
    kernel_dims: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    mode: ExecMode,
) -> (Array4<f64>, Array1<f64>) {
    let (b, _c, h, wd) = x.dim();
    let (co, ci, kh, kw) = kernel_dims;
    let (ho, wo) = (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad));

    let partials = map_chunks(mode, b, GRAD_CHUNK, |range| {
        let mut dw = Array2::<f64>::zeros((co, ci * kh * kw));
        let mut db = Array1::<f64>::zeros(co);
        for i in range {
            let cols = im2col(x.index_axis(Axis(0), i), kh, kw, stride, pad);
            let dy_flat = dy
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((co, ho * wo))
                .expect("grad slice is contiguous");
            dw = dw + dy_flat.dot(&cols);
            for (j, row) in dy_flat.axis_iter(Axis(0)).enumerate() {
                db[j] += row.sum();
            }
        }
        (dw, db)
    });

    let mut dw = Array2::<f64>::zeros((co, ci * kh * kw));
    let mut db = Array1::<f64>::zeros(co);
    for (pw, pb) in partials {
        dw = dw + pw;
        db = db + pb;
    }
    (
        dw.into_shape_with_order((co, ci, kh, kw))
            .expect("weight gradient is contiguous"),
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::derive_rng;
    use rand::Rng;

    fn randn4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, "conv-test");
        Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct quadruple-loop convolution used as the oracle.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: Option<&Array1<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (co, _, kh, kw) = w.dim();
        let (ho, wo) = (out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad));
        let mut y = Array4::zeros((b, co, ho, wo));
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[o, ci, ky as usize, kx as usize]];
                                    }
                                }
                            }
                        }
                        y[[bi, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let x = randn4((3, 2, 9, 7), 1);
        let w = randn4((4, 2, 3, 3), 2);
        let bias = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d_forward(
                x.view(),
                w.view(),
                Some(&bias),
                stride,
                pad,
                ExecMode::Parallel,
            );
            let slow = conv_naive(&x, &w, Some(&bias), stride, pad);
            let diff = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} pad {pad}: diff {diff}");
        }
    }

    #[test]
    fn backward_data_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv_backward_data(dy)> for linear conv.
        let x = randn4((2, 3, 8, 8), 3);
        let w = randn4((5, 3, 3, 3), 4);
        let dy_dims = {
            let y = conv2d_forward(x.view(), w.view(), None, 2, 1, ExecMode::Sequential);
            y.dim()
        };
        let dy = randn4(dy_dims, 5);
        let y = conv2d_forward(x.view(), w.view(), None, 2, 1, ExecMode::Sequential);
        let dx = conv2d_backward_data(dy.view(), w.view(), x.dim(), 2, 1, ExecMode::Sequential);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn backward_weights_matches_finite_difference() {
        let x = randn4((2, 2, 6, 6), 6);
        let mut w = randn4((3, 2, 3, 3), 7);
        let dy_dims = conv2d_forward(x.view(), w.view(), None, 1, 1, ExecMode::Sequential).dim();
        let dy = randn4(dy_dims, 8);
        let (dw, db) =
            conv2d_backward_weights(dy.view(), x.view(), w.dim(), 1, 1, ExecMode::Sequential);

        let loss = |w: &Array4<f64>, bias: &Array1<f64>| {
            let y = conv2d_forward(x.view(), w.view(), Some(bias), 1, 1, ExecMode::Sequential);
            y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut bias = Array1::zeros(3);
        let h = 1e-6;
        for &(o, c, ky, kx) in &[(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)] {
            let orig = w[[o, c, ky, kx]];
            w[[o, c, ky, kx]] = orig + h;
            let up = loss(&w, &bias);
            w[[o, c, ky, kx]] = orig - h;
            let down = loss(&w, &bias);
            w[[o, c, ky, kx]] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = dw[[o, c, ky, kx]];
            assert!((fd - ad).abs() / fd.abs().max(1e-6) < 1e-4);
        }
        let orig = bias[1];
        bias[1] = orig + h;
        let up = loss(&w, &bias);
        bias[1] = orig - h;
        let down = loss(&w, &bias);
        let fd = (up - down) / (2.0 * h);
        assert!((fd - db[1]).abs() / fd.abs().max(1e-6) < 1e-4);
    }

    #[test]
    fn modes_agree_bitwise() {
        let x = randn4((5, 3, 16, 16), 9);
        let w = randn4((8, 3, 3, 3), 10);
        let bias = Array1::from_shape_fn(8, |i| i as f64 * 0.01);
        let seq = conv2d_forward(x.view(), w.view(), Some(&bias), 2, 1, ExecMode::Sequential);
        let par = conv2d_forward(x.view(), w.view(), Some(&bias), 2, 1, ExecMode::Parallel);
        assert_eq!(seq, par);

        let dy = randn4(seq.dim(), 11);
        let seq_dx =
            conv2d_backward_data(dy.view(), w.view(), x.dim(), 2, 1, ExecMode::Sequential);
        let par_dx = conv2d_backward_data(dy.view(), w.view(), x.dim(), 2, 1, ExecMode::Parallel);
        assert_eq!(seq_dx, par_dx);

        let (seq_dw, seq_db) =
            conv2d_backward_weights(dy.view(), x.view(), w.dim(), 2, 1, ExecMode::Sequential);
        let (par_dw, par_db) =
            conv2d_backward_weights(dy.view(), x.view(), w.dim(), 2, 1, ExecMode::Parallel);
        assert_eq!(seq_dw, par_dw);
        assert_eq!(seq_db, par_db);
    }
}
