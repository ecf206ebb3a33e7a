//! Layer types. Construction registers parameters in a [`ParamStore`];
//! layers themselves hold only ids and hyperparameters, so one model
//! definition works for any float width and element type.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use super::{he_normal, Fwd, Mode, ParamId, ParamStore};
use crate::autodiff::{Scalar, Tx};

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            true,
        );
        let b = bias.then(|| {
            store.add(format!("{name}.bias"), ArrayD::zeros(ndarray::IxDyn(&[out_ch])), true)
        });
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let w = cx.param(self.w);
        let y = x.conv2d(w, self.stride, self.pad);
        match self.b {
            Some(bid) => {
                let b = cx.param(bid);
                y.add_chan(b)
            }
            None => y,
        }
    }

    pub fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.entry(self.w).value.shape()[0]
    }
}

/// Transposed convolution with kernel size == stride (pure upsample).
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch;
        let w = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[in_ch, out_ch, stride, stride], fan_in),
            true,
        );
        let b = bias.then(|| {
            store.add(format!("{name}.bias"), ArrayD::zeros(ndarray::IxDyn(&[out_ch])), true)
        });
        ConvTranspose2d { w, b, stride }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let w = cx.param(self.w);
        let y = x.conv_transpose2d(w, self.stride);
        match self.b {
            Some(bid) => {
                let b = cx.param(bid);
                y.add_chan(b)
            }
            None => y,
        }
    }
}

pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), he_normal(rng, &[out_f, in_f], in_f), true);
        let b = store.add(format!("{name}.bias"), ArrayD::zeros(ndarray::IxDyn(&[out_f])), true);
        Linear { w, b }
    }

    /// `x: [N, in] -> [N, out]`
    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        x.matmul(w.permute(&[1, 0])).add_row(b)
    }

    pub fn out_features<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.entry(self.w).value.shape()[0]
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        let dim = ndarray::IxDyn(&[ch]);
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), ArrayD::from_elem(dim.clone(), T::one()), true),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(dim.clone()), true),
            running_mean: store.add(format!("{name}.running_mean"), ArrayD::zeros(dim.clone()), false),
            running_var: store.add(
                format!("{name}.running_var"),
                ArrayD::from_elem(dim, T::one()),
                false,
            ),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        match cx.mode {
            Mode::Train { update_stats } => {
                let gamma = cx.param(self.gamma);
                let beta = cx.param(self.beta);
                let (y, mean, var) = x.batch_norm_train(gamma, beta, self.eps);
                if update_stats {
                    let m = {
                        let s = x.shape();
                        (s[0] * s[2] * s[3]) as f64
                    };
                    // Running variance keeps the unbiased estimate.
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    let mom = T::of_f64(self.momentum);
                    let keep = T::of_f64(1.0 - self.momentum);
                    let ub = T::of_f64(unbias);
                    let mut rm = (*cx.store.value(self.running_mean)).clone();
                    let mut rv = (*cx.store.value(self.running_var)).clone();
                    let (mean, var) = (mean.into_dyn(), var.into_dyn());
                    ndarray::Zip::from(&mut rm).and(&mean).for_each(|r, &b| {
                        *r = keep * *r + mom * b;
                    });
                    ndarray::Zip::from(&mut rv).and(&var).for_each(|r, &b| {
                        *r = keep * *r + mom * b * ub;
                    });
                    cx.store.set_value(self.running_mean, rm);
                    cx.store.set_value(self.running_var, rv);
                }
                y
            }
            Mode::Eval => {
                // y = (x - rm) / sqrt(rv + eps) * gamma + beta, folded into a
                // per-channel scale and shift. No gradients flow to the
                // normalization parameters in eval mode.
                let gamma = cx.store.value(self.gamma);
                let beta = cx.store.value(self.beta);
                let rm = cx.store.value(self.running_mean);
                let rv = cx.store.value(self.running_var);
                let eps = self.eps;
                let mut scale = (*gamma).clone();
                let mut shift = (*beta).clone();
                ndarray::Zip::from(&mut scale).and(&*rv).for_each(|s, &v| {
                    *s = *s * T::of_f64(1.0 / (v.as_f64() + eps).sqrt());
                });
                ndarray::Zip::from(&mut shift).and(&scale).and(&*rm).for_each(|t, &s, &m| {
                    *t = *t - s * m;
                });
                let s = cx.constant(scale);
                let t = cx.constant(shift);
                x.mul_chan(s).add_chan(t)
            }
        }
    }
}

/// Two 3x3 convolutions with batch normalization + ReLU between them and
/// an identity shortcut.
pub struct ResBlock {
    pub conv1: Conv2d,
    pub bn: BatchNorm2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        ResBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), ch),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1, true),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let h = self.conv1.forward(cx, x);
        let h = self.bn.forward(cx, h);
        let h = h.relu();
        let h = self.conv2.forward(cx, h);
        x.add(h)
    }
}
