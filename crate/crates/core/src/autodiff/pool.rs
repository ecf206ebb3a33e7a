//! Pooling kernels: max pooling, adaptive average pooling, global
//! average pooling.

use ndarray::{ArrayD, IxDyn};

use super::{dims4, Scalar};
use crate::autodiff::conv::conv_out_dim;

pub fn max_pool_fwd<T: Scalar>(
    x: &ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, Vec<u32>) {
    let (n, c, h, w) = dims4(x);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let xs = x.as_slice().expect("standard layout");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, oh, ow]));
    let mut argmax = vec![0u32; n * c * oh * ow];
    let os = out.as_slice_mut().unwrap();
    let mut oidx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..k {
                        let ih = (oi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (oj * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = plane + ih as usize * w + iw as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    os[oidx] = best;
                    argmax[oidx] = best_idx as u32;
                    oidx += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_bwd<T: Scalar>(x_dim: IxDyn, g: &ArrayD<T>, argmax: &[u32]) -> ArrayD<T> {
    let mut gx = ArrayD::<T>::zeros(x_dim);
    let gxs = gx.as_slice_mut().unwrap();
    let gs = g.as_slice().expect("standard layout");
    for (gi, &ai) in gs.iter().zip(argmax.iter()) {
        let t = ai as usize;
        gxs[t] = gxs[t] + *gi;
    }
    gx
}

/// Window bounds for adaptive pooling: output cell `i` of `out` covers
/// input `[floor(i*n/out), ceil((i+1)*n/out))`.
fn adaptive_span(i: usize, n: usize, out: usize) -> (usize, usize) {
    let lo = i * n / out;
    let hi = ((i + 1) * n).div_ceil(out);
    (lo, hi)
}

pub fn adaptive_avg_pool_fwd<T: Scalar>(x: &ArrayD<T>, out_hw: usize) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let xs = x.as_slice().expect("standard layout");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, out_hw, out_hw]));
    let os = out.as_slice_mut().unwrap();
    let mut oidx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oi in 0..out_hw {
                let (h0, h1) = adaptive_span(oi, h, out_hw);
                for oj in 0..out_hw {
                    let (w0, w1) = adaptive_span(oj, w, out_hw);
                    let mut s = T::zero();
                    for ih in h0..h1 {
                        let row = plane + ih * w;
                        for iw in w0..w1 {
                            s = s + xs[row + iw];
                        }
                    }
                    let cnt = T::of_f64(((h1 - h0) * (w1 - w0)) as f64);
                    os[oidx] = s / cnt;
                    oidx += 1;
                }
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_bwd<T: Scalar>(x_dim: IxDyn, g: &ArrayD<T>, out_hw: usize) -> ArrayD<T> {
    let (n, c, h, w) = (x_dim[0], x_dim[1], x_dim[2], x_dim[3]);
    let mut gx = ArrayD::<T>::zeros(x_dim.clone());
    let gxs = gx.as_slice_mut().unwrap();
    let gs = g.as_slice().expect("standard layout");
    let mut oidx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oi in 0..out_hw {
                let (h0, h1) = adaptive_span(oi, h, out_hw);
                for oj in 0..out_hw {
                    let (w0, w1) = adaptive_span(oj, w, out_hw);
                    let cnt = T::of_f64(((h1 - h0) * (w1 - w0)) as f64);
                    let v = gs[oidx] / cnt;
                    for ih in h0..h1 {
                        let row = plane + ih * w;
                        for iw in w0..w1 {
                            gxs[row + iw] = gxs[row + iw] + v;
                        }
                    }
                    oidx += 1;
                }
            }
        }
    }
    gx
}

pub fn global_avg_pool_fwd<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let m = T::of_f64((h * w) as f64);
    let xs = x.as_slice().expect("standard layout");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c]));
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            let mut s = T::zero();
            for v in &xs[plane..plane + h * w] {
                s = s + *v;
            }
            os[ni * c + ci] = s / m;
        }
    }
    out
}

pub fn global_avg_pool_bwd<T: Scalar>(x_dim: IxDyn, g: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h, w) = (x_dim[0], x_dim[1], x_dim[2], x_dim[3]);
    let m = T::of_f64((h * w) as f64);
    let gs = g.as_slice().expect("standard layout");
    let mut gx = ArrayD::<T>::zeros(x_dim.clone());
    let gxs = gx.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let v = gs[ni * c + ci] / m;
            let plane = (ni * c + ci) * h * w;
            for t in &mut gxs[plane..plane + h * w] {
                *t = v;
            }
        }
    }
    gx
}
