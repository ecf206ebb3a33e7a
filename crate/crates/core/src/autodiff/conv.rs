//! Convolution kernels: im2col + gemm forward, matching backward.
//!
//! Layouts: activations `[N,C,H,W]`, conv weights `[OC,IC,K,K]`,
//! transposed-conv weights `[IC,OC,K,K]`. Batches are processed in
//! parallel; each sample's output is written by exactly one thread.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix2, IxDyn};
use rayon::prelude::*;

use super::{dims4, Scalar};

pub fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Gathers conv patches of one sample into `col: [C*K*K, OH*OW]`.
fn im2col<T: Scalar>(
    x: &ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut Array2<T>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    let out_off = base + oi * ow;
                    if ih < 0 || ih >= h as isize {
                        cs[out_off..out_off + ow].fill(T::zero());
                        continue;
                    }
                    let in_base = (ci * h + ih as usize) * w;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        cs[out_off + oj] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            xs[in_base + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col: [C*K*K, OH*OW]` back into one sample `[C,H,W]`.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut ArrayViewMut3<'_, T>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = col.as_slice().expect("standard layout");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + ih as usize) * w;
                    let out_off = base + oi * ow;
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            let t = in_base + iw as usize;
                            xs[t] = xs[t] + cs[out_off + oj];
                        }
                    }
                }
            }
        }
    }
}

fn weight_mat<T: Scalar>(w: &ArrayD<T>) -> (ArrayView2<'_, T>, usize, usize, usize) {
    let (oc, ic, k, k2) = dims4(w);
    assert_eq!(k, k2, "square kernels only");
    let wm = w.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    (wm, oc, ic, k)
}

pub fn conv2d_fwd<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let (n, c, h, wd) = dims4(x);
    let (wm, oc, ic, k) = weight_mat(w);
    assert_eq!(c, ic, "conv2d: input channels");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, oc, oh, ow]));
    ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|o, xn| {
            let xn3 = xn.into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
            im2col(&xn3, k, stride, pad, &mut col);
            let mut o2 = o.into_shape_with_order((oc, oh * ow)).unwrap();
            let mut o2 = o2.view_mut().into_dimensionality::<Ix2>().unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &wm, &col.view(), T::zero(), &mut o2);
        });
    out
}

pub fn conv2d_bwd<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let (n, c, _h, _wd) = dims4(x);
    let (wm, oc, _ic, k) = weight_mat(w);
    let (gn, goc, oh, ow) = dims4(g);
    assert_eq!((gn, goc), (n, oc));
    let mut gx = ArrayD::<T>::zeros(x.raw_dim());
    // dX_n = W^T [CKK,OC] x g_n [OC, OH*OW], scattered back by col2im.
    ndarray::Zip::from(gx.axis_iter_mut(Axis(0)))
        .and(g.axis_iter(Axis(0)))
        .par_for_each(|gxn, gn_| {
            let g2 = gn_.into_shape_with_order((oc, oh * ow)).unwrap();
            let g2 = g2.into_dimensionality::<Ix2>().unwrap();
            let mut dcol = Array2::<T>::zeros((c * k * k, oh * ow));
            ndarray::linalg::general_mat_mul(T::one(), &wm.t(), &g2, T::zero(), &mut dcol);
            let mut gxn3 = gxn.into_dimensionality::<ndarray::Ix3>().unwrap();
            col2im(&dcol, k, stride, pad, &mut gxn3);
        });
    // dW = sum_n g_n x col_n^T; per-sample partials computed in parallel,
    // reduced in a fixed batch order.
    let partials: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xn = x.index_axis(Axis(0), ni).into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
            im2col(&xn, k, stride, pad, &mut col);
            let g2 = g
                .index_axis(Axis(0), ni)
                .into_shape_with_order((oc, oh * ow))
                .unwrap()
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut dw = Array2::<T>::zeros((oc, c * k * k));
            ndarray::linalg::general_mat_mul(T::one(), &g2, &col.t(), T::zero(), &mut dw);
            dw
        })
        .collect();
    let mut gw = Array2::<T>::zeros((oc, c * k * k));
    for p in partials {
        gw += &p;
    }
    let gw = gw.into_shape_with_order(IxDyn(&[oc, c, k, k])).unwrap();
    (gx, gw)
}

/// Transposed conv with kernel size == stride and no padding: every
/// output pixel is written by exactly one (input pixel, kernel tap)
/// pair, so the forward pass is a pure gemm + scatter.
pub fn convt2d_fwd<T: Scalar>(x: &ArrayD<T>, w: &ArrayD<T>, stride: usize) -> ArrayD<T> {
    let (n, c, h, wd) = dims4(x);
    let (ic, oc, k, k2) = dims4(w);
    assert_eq!(k, k2);
    assert_eq!(k, stride, "convt2d: kernel size must equal stride");
    assert_eq!(c, ic, "convt2d: input channels");
    let (oh, ow) = (h * stride, wd * stride);
    let wm = w.view().into_shape_with_order((ic, oc * k * k)).unwrap();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, oc, oh, ow]));
    ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
        .and(x.axis_iter(Axis(0)))
        .par_for_each(|mut on, xn| {
            let x2 = xn.into_shape_with_order((ic, h * wd)).unwrap();
            let x2 = x2.into_dimensionality::<Ix2>().unwrap();
            let mut tmp = Array2::<T>::zeros((oc * k * k, h * wd));
            ndarray::linalg::general_mat_mul(T::one(), &wm.t(), &x2, T::zero(), &mut tmp);
            let os = on.as_slice_mut().unwrap();
            let ts = tmp.as_slice().unwrap();
            for co in 0..oc {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (co * k + ki) * k + kj;
                        let base = row * h * wd;
                        for ih in 0..h {
                            let out_row = (co * oh + ih * stride + ki) * ow + kj;
                            let in_off = base + ih * wd;
                            for iw in 0..wd {
                                os[out_row + iw * stride] = ts[in_off + iw];
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn convt2d_bwd<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    g: &ArrayD<T>,
    stride: usize,
) -> (ArrayD<T>, ArrayD<T>) {
    let (n, c, h, wd) = dims4(x);
    let (ic, oc, k, _) = dims4(w);
    let wm = w.view().into_shape_with_order((ic, oc * k * k)).unwrap();
    // Gather g into the same [OC*K*K, H*W] layout the forward scattered to.
    let gather = |ni: usize| -> Array2<T> {
        let gn = g.index_axis(Axis(0), ni);
        let gs = gn.as_slice().unwrap();
        let (oh, ow) = (h * stride, wd * stride);
        let mut t = Array2::<T>::zeros((oc * k * k, h * wd));
        let ts = t.as_slice_mut().unwrap();
        for co in 0..oc {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (co * k + ki) * k + kj;
                    let base = row * h * wd;
                    for ih in 0..h {
                        let g_row = (co * oh + ih * stride + ki) * ow + kj;
                        let t_off = base + ih * wd;
                        for iw in 0..wd {
                            ts[t_off + iw] = gs[g_row + iw * stride];
                        }
                    }
                }
            }
        }
        t
    };
    let mut gx = ArrayD::<T>::zeros(x.raw_dim());
    ndarray::Zip::indexed(gx.axis_iter_mut(Axis(0))).par_for_each(|ni, gxn| {
        let t = gather(ni);
        let mut gx2 = gxn.into_shape_with_order((c, h * wd)).unwrap();
        let mut gx2 = gx2.view_mut().into_dimensionality::<Ix2>().unwrap();
        ndarray::linalg::general_mat_mul(T::one(), &wm, &t.view(), T::zero(), &mut gx2);
    });
    let partials: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let t = gather(ni);
            let x2 = x
                .index_axis(Axis(0), ni)
                .into_shape_with_order((ic, h * wd))
                .unwrap()
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut dw = Array2::<T>::zeros((ic, oc * k * k));
            ndarray::linalg::general_mat_mul(T::one(), &x2, &t.t(), T::zero(), &mut dw);
            dw
        })
        .collect();
    let mut gw = Array2::<T>::zeros((ic, oc * k * k));
    for p in partials {
        gw += &p;
    }
    let gw = gw.into_shape_with_order(IxDyn(&[ic, oc, k, k])).unwrap();
    (gx, gw)
}
