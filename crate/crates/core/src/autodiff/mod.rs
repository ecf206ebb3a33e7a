//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! Forward passes build a tape of nodes; `backward` walks the tape in
//! reverse and accumulates gradients per node. The engine is generic
//! over `f32`/`f64` so the same model code can train in single
//! precision and be gradient-checked against central finite differences
//! in double precision. All kernels are deterministic: parallelism only
//! ever splits work so that each output element is produced by exactly
//! one thread with a fixed sequential reduction order.

mod conv;
mod pool;

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array1, ArrayD, Axis, IxDyn};

/// Element type the engine works with.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    SoftmaxLastDim(usize),
    MeanAll(usize),
    SumAll(usize),
    /// `[N,C,H,W] + [C]`
    AddChan { x: usize, bias: usize },
    /// `[N,C,H,W] * [C]`
    MulChan { x: usize, scale: usize },
    /// `[N,F] + [F]`
    AddRow { x: usize, bias: usize },
    /// `[N,C,H,W] * [N,C]` (per-sample channel scale)
    ScaleNc { x: usize, scale: usize },
    /// `[N,C,H,W] + [N,C]` (per-sample channel shift)
    ShiftNc { x: usize, shift: usize },
    MatMul { a: usize, b: usize },
    BatMatMul { a: usize, b: usize },
    Reshape { x: usize },
    Permute { x: usize, axes: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, stride: usize },
    MaxPool2d { x: usize, argmax: Arc<Vec<u32>> },
    AdaptiveAvgPool { x: usize, out_hw: usize },
    GlobalAvgPool { x: usize },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Arc<ArrayD<T>>,
        inv_std: Arc<Array1<T>>,
    },
}

struct Node<T: Scalar> {
    value: Arc<ArrayD<T>>,
    op: Op<T>,
}

/// Records forward operations for one backward pass; dropped afterwards.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>) -> usize {
        // Slice-based kernels and reshapes assume standard layout, so
        // normalize once here (concatenate and broadcast arithmetic can
        // hand back permuted memory orders).
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.push_rc(Arc::new(value), op)
    }

    fn push_rc(&self, value: Arc<ArrayD<T>>, op: Op<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        nodes.len() - 1
    }

    /// New leaf node owning `value`.
    pub fn leaf(&self, value: ArrayD<T>) -> Tx<'_, T> {
        Tx { tape: self, id: self.push(value, Op::Leaf) }
    }

    /// New leaf node sharing `value` without copying.
    pub fn leaf_shared(&self, value: Arc<ArrayD<T>>) -> Tx<'_, T> {
        Tx { tape: self, id: self.push_rc(value, Op::Leaf) }
    }

    /// Re-materialize a handle to an existing node.
    pub fn handle(&self, id: usize) -> Tx<'_, T> {
        debug_assert!(id < self.len());
        Tx { tape: self, id }
    }

    fn value(&self, id: usize) -> Arc<ArrayD<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }
}

/// Handle to a tape node. Cheap to copy; all ops are methods.
#[derive(Clone, Copy)]
pub struct Tx<'t, T: Scalar> {
    tape: &'t Tape<T>,
    pub id: usize,
}

impl<'t, T: Scalar> Tx<'t, T> {
    pub fn value(&self) -> Arc<ArrayD<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.ndim(), 0);
        *v.first().expect("scalar node")
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>) -> Tx<'t, T> {
        Tx { tape: self.tape, id: self.tape.push(value, op) }
    }

    pub fn add(self, rhs: Tx<'t, T>) -> Tx<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        self.push(&*a + &*b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Tx<'t, T>) -> Tx<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        self.push(&*a - &*b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Tx<'t, T>) -> Tx<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        self.push(&*a * &*b, Op::Mul(self.id, rhs.id))
    }

    pub fn neg(self) -> Tx<'t, T> {
        self.push(self.value().mapv(|v| -v), Op::Neg(self.id))
    }

    pub fn add_scalar(self, s: T) -> Tx<'t, T> {
        self.push(self.value().mapv(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn mul_scalar(self, s: T) -> Tx<'t, T> {
        self.push(self.value().mapv(|v| v * s), Op::MulScalar(self.id, s))
    }

    pub fn abs(self) -> Tx<'t, T> {
        self.push(self.value().mapv(|v| v.abs()), Op::Abs(self.id))
    }

    pub fn relu(self) -> Tx<'t, T> {
        let z = T::zero();
        self.push(self.value().mapv(|v| v.max(z)), Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Tx<'t, T> {
        self.push(self.value().mapv(sigmoid_stable), Op::Sigmoid(self.id))
    }

    /// log(sigmoid(x)), computed without overflow.
    pub fn log_sigmoid(self) -> Tx<'t, T> {
        self.push(self.value().mapv(log_sigmoid_stable), Op::LogSigmoid(self.id))
    }

    /// Row-wise softmax over the last axis of a 2-d tensor.
    pub fn softmax_rows(self) -> Tx<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "softmax_rows expects [N,K]");
        let mut y = (*x).clone();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y, Op::SoftmaxLastDim(self.id))
    }

    pub fn mean_all(self) -> Tx<'t, T> {
        let x = self.value();
        let n = T::of_f64(x.len() as f64);
        let s = sum_f64(&x);
        self.push(scalar0(T::of_f64(s) / n), Op::MeanAll(self.id))
    }

    pub fn sum_all(self) -> Tx<'t, T> {
        let x = self.value();
        self.push(scalar0(T::of_f64(sum_f64(&x))), Op::SumAll(self.id))
    }

    /// `[N,C,H,W] + bias[C]`
    pub fn add_chan(self, bias: Tx<'t, T>) -> Tx<'t, T> {
        let (x, b) = (self.value(), bias.value());
        let c = x.shape()[1];
        assert_eq!(b.len(), c, "add_chan: bias length");
        let b3 = b.view().into_shape_with_order((c, 1, 1)).unwrap();
        self.push(&*x + &b3, Op::AddChan { x: self.id, bias: bias.id })
    }

    /// `[N,C,H,W] * scale[C]`
    pub fn mul_chan(self, scale: Tx<'t, T>) -> Tx<'t, T> {
        let (x, s) = (self.value(), scale.value());
        let c = x.shape()[1];
        assert_eq!(s.len(), c, "mul_chan: scale length");
        let s3 = s.view().into_shape_with_order((c, 1, 1)).unwrap();
        self.push(&*x * &s3, Op::MulChan { x: self.id, scale: scale.id })
    }

    /// `[N,F] + bias[F]`
    pub fn add_row(self, bias: Tx<'t, T>) -> Tx<'t, T> {
        let (x, b) = (self.value(), bias.value());
        assert_eq!(x.shape()[1], b.len(), "add_row: bias length");
        self.push(&*x + &*b, Op::AddRow { x: self.id, bias: bias.id })
    }

    /// `[N,C,H,W] * scale[N,C]` — per-sample channel-wise scaling.
    pub fn scale_nc(self, scale: Tx<'t, T>) -> Tx<'t, T> {
        let (x, s) = (self.value(), scale.value());
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(s.shape(), [n, c], "scale_nc: scale shape");
        let s4 = s.view().into_shape_with_order((n, c, 1, 1)).unwrap();
        self.push(&*x * &s4, Op::ScaleNc { x: self.id, scale: scale.id })
    }

    /// `[N,C,H,W] + shift[N,C]` — per-sample channel-wise shift.
    pub fn shift_nc(self, shift: Tx<'t, T>) -> Tx<'t, T> {
        let (x, s) = (self.value(), shift.value());
        let (n, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(s.shape(), [n, c], "shift_nc: shift shape");
        let s4 = s.view().into_shape_with_order((n, c, 1, 1)).unwrap();
        self.push(&*x + &s4, Op::ShiftNc { x: self.id, shift: shift.id })
    }

    /// `[M,K] x [K,N]`
    pub fn matmul(self, rhs: Tx<'t, T>) -> Tx<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = matmul2(&a, &b);
        self.push(out, Op::MatMul { a: self.id, b: rhs.id })
    }

    /// `[B,M,K] x [B,K,N]`
    pub fn bmm(self, rhs: Tx<'t, T>) -> Tx<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = bmm3(&a, &b);
        self.push(out, Op::BatMatMul { a: self.id, b: rhs.id })
    }

    pub fn reshape(self, shape: &[usize]) -> Tx<'t, T> {
        let x = self.value();
        assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape: element count");
        let y = (*x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape of standard-layout array");
        self.push(y, Op::Reshape { x: self.id })
    }

    pub fn permute(self, axes: &[usize]) -> Tx<'t, T> {
        let x = self.value();
        let y = x.view().permuted_axes(axes.to_vec()).as_standard_layout().to_owned();
        self.push(y, Op::Permute { x: self.id, axes: axes.to_vec() })
    }

    pub fn concat(tensors: &[Tx<'t, T>], axis: usize) -> Tx<'t, T> {
        assert!(!tensors.is_empty());
        let vals: Vec<_> = tensors.iter().map(|t| t.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let ids = tensors.iter().map(|t| t.id).collect();
        tensors[0].push(y, Op::Concat { xs: ids, axis })
    }

    /// Convolution over `[N,C,H,W]` with square kernel `w: [OC,IC,K,K]`.
    pub fn conv2d(self, w: Tx<'t, T>, stride: usize, pad: usize) -> Tx<'t, T> {
        let out = conv::conv2d_fwd(&self.value(), &w.value(), stride, pad);
        self.push(out, Op::Conv2d { x: self.id, w: w.id, stride, pad })
    }

    /// Transposed convolution with kernel size == stride (pure upsampling),
    /// weights `[IC,OC,K,K]`.
    pub fn conv_transpose2d(self, w: Tx<'t, T>, stride: usize) -> Tx<'t, T> {
        let out = conv::convt2d_fwd(&self.value(), &w.value(), stride);
        self.push(out, Op::ConvTranspose2d { x: self.id, w: w.id, stride })
    }

    pub fn max_pool2d(self, kernel: usize, stride: usize, pad: usize) -> Tx<'t, T> {
        let (out, argmax) = pool::max_pool_fwd(&self.value(), kernel, stride, pad);
        self.push(out, Op::MaxPool2d { x: self.id, argmax: Arc::new(argmax) })
    }

    /// Adaptive average pooling of `[N,C,H,W]` to `[N,C,out,out]`.
    pub fn adaptive_avg_pool2d(self, out_hw: usize) -> Tx<'t, T> {
        let out = pool::adaptive_avg_pool_fwd(&self.value(), out_hw);
        self.push(out, Op::AdaptiveAvgPool { x: self.id, out_hw })
    }

    /// Spatial mean of `[N,C,H,W]`, producing `[N,C]`.
    pub fn global_avg_pool(self) -> Tx<'t, T> {
        let out = pool::global_avg_pool_fwd(&self.value());
        self.push(out, Op::GlobalAvgPool { x: self.id })
    }

    /// Training-mode batch normalization over `[N,C,H,W]` using batch
    /// statistics; returns the output plus the batch mean/var (biased)
    /// so callers can update running statistics.
    pub fn batch_norm_train(
        self,
        gamma: Tx<'t, T>,
        beta: Tx<'t, T>,
        eps: f64,
    ) -> (Tx<'t, T>, Array1<T>, Array1<T>) {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let m = (n * h * w) as f64;
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let lane = x.index_axis(Axis(1), ci);
            let mu = sum_f64_view(&lane) / m;
            let mut acc = 0.0f64;
            for v in lane.iter() {
                let d = v.as_f64() - mu;
                acc += d * d;
            }
            mean[ci] = T::of_f64(mu);
            var[ci] = T::of_f64(acc / m);
        }
        let mut inv_std = Array1::<T>::zeros(c);
        for ci in 0..c {
            inv_std[ci] = T::of_f64(1.0 / (var[ci].as_f64() + eps).sqrt());
        }
        let mut xhat = (*x).clone();
        {
            let mean_b = mean.view().into_shape_with_order((c, 1, 1)).unwrap();
            let istd_b = inv_std.view().into_shape_with_order((c, 1, 1)).unwrap();
            xhat -= &mean_b;
            xhat *= &istd_b;
        }
        let g = gamma.value();
        let b = beta.value();
        let g3 = g.view().into_shape_with_order((c, 1, 1)).unwrap();
        let b3 = b.view().into_shape_with_order((c, 1, 1)).unwrap();
        let y = &xhat * &g3 + &b3;
        let xhat = Arc::new(xhat);
        let out = self.push(
            y,
            Op::BatchNormTrain {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std: Arc::new(inv_std),
            },
        );
        (out, mean, var)
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    let z = T::zero();
    let o = T::one();
    if x >= z {
        o / (o + (-x).exp())
    } else {
        let e = x.exp();
        e / (o + e)
    }
}

fn log_sigmoid_stable<T: Scalar>(x: T) -> T {
    let z = T::zero();
    let o = T::one();
    if x >= z {
        -(o + (-x).exp()).ln()
    } else {
        x - (o + x.exp()).ln()
    }
}

fn scalar0<T: Scalar>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn sum_f64<T: Scalar>(a: &ArrayD<T>) -> f64 {
    a.iter().map(|v| v.as_f64()).sum()
}

fn sum_f64_view<T: Scalar>(a: &ndarray::ArrayViewD<'_, T>) -> f64 {
    a.iter().map(|v| v.as_f64()).sum()
}

pub(crate) fn dims4<T: Scalar>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn matmul2<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2-d");
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2-d");
    assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dims");
    let mut out = ndarray::Array2::<T>::zeros((a2.shape()[0], b2.shape()[1]));
    ndarray::linalg::general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut out);
    out.into_dyn()
}

fn bmm3<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> ArrayD<T> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 3, "bmm lhs 3-d");
    assert_eq!(sb.len(), 3, "bmm rhs 3-d");
    assert_eq!(sa[0], sb[0], "bmm: batch dims");
    assert_eq!(sa[2], sb[1], "bmm: inner dims");
    let mut out = ArrayD::<T>::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
    ndarray::Zip::from(out.axis_iter_mut(Axis(0)))
        .and(a.axis_iter(Axis(0)))
        .and(b.axis_iter(Axis(0)))
        .par_for_each(|mut o, an, bn| {
            let a2 = an.into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = bn.into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut o2 = o.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut o2);
        });
    out
}

/// Per-node gradients produced by [`backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: Tx<'_, T>) -> Option<&ArrayD<T>> {
        self.grads[t.id].as_ref()
    }

    pub fn get_id(&self, id: usize) -> Option<&ArrayD<T>> {
        self.grads[id].as_ref()
    }

    pub fn take_id(&mut self, id: usize) -> Option<ArrayD<T>> {
        self.grads[id].take()
    }
}

fn acc<T: Scalar>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(a) => *a += &g,
        None => *slot = Some(g),
    }
}

/// Reverse pass from a scalar loss node. Seeds with 1 and accumulates
/// gradients for every node that feeds the loss.
pub fn backward<T: Scalar>(loss: Tx<'_, T>) -> Gradients<T> {
    backward_seeded(&[(loss, T::one())])
}

/// Reverse pass seeded with several weighted scalar losses at once;
/// gradients of `sum_i w_i * loss_i` are accumulated in one walk.
pub fn backward_seeded<T: Scalar>(seeds: &[(Tx<'_, T>, T)]) -> Gradients<T> {
    assert!(!seeds.is_empty());
    let tape = seeds[0].0.tape;
    let nodes = tape.nodes.borrow();
    let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
    for (t, w) in seeds {
        debug_assert_eq!(t.value().ndim(), 0, "loss seed must be scalar");
        acc(&mut grads[t.id], scalar0(*w));
    }
    let top = seeds.iter().map(|(t, _)| t.id).max().unwrap();
    for id in (0..=top).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &nodes[id];
        match &node.op {
            Op::Leaf => {
                grads[id] = Some(g);
                continue;
            }
            Op::Add(a, b) => {
                acc(&mut grads[*a], g.clone());
                acc(&mut grads[*b], g);
            }
            Op::Sub(a, b) => {
                acc(&mut grads[*a], g.clone());
                acc(&mut grads[*b], g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                acc(&mut grads[*a], &g * &**vb);
                acc(&mut grads[*b], &g * &**va);
            }
            Op::Neg(x) => acc(&mut grads[*x], g.mapv(|v| -v)),
            Op::AddScalar(x) => acc(&mut grads[*x], g),
            Op::MulScalar(x, s) => acc(&mut grads[*x], g.mapv(|v| v * *s)),
            Op::Abs(x) => {
                let vx = &nodes[*x].value;
                let mut d = g;
                ndarray::Zip::from(&mut d).and(&**vx).for_each(|gi, xi| {
                    let z = T::zero();
                    if *xi < z {
                        *gi = -*gi;
                    } else if *xi == z {
                        *gi = z;
                    }
                });
                acc(&mut grads[*x], d);
            }
            Op::Relu(x) => {
                let vx = &nodes[*x].value;
                let mut d = g;
                ndarray::Zip::from(&mut d).and(&**vx).for_each(|gi, xi| {
                    if *xi <= T::zero() {
                        *gi = T::zero();
                    }
                });
                acc(&mut grads[*x], d);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut d = g;
                ndarray::Zip::from(&mut d).and(&**y).for_each(|gi, yi| {
                    *gi = *gi * *yi * (T::one() - *yi);
                });
                acc(&mut grads[*x], d);
            }
            Op::LogSigmoid(x) => {
                let vx = &nodes[*x].value;
                let mut d = g;
                ndarray::Zip::from(&mut d).and(&**vx).for_each(|gi, xi| {
                    *gi = *gi * sigmoid_stable(-*xi);
                });
                acc(&mut grads[*x], d);
            }
            Op::SoftmaxLastDim(x) => {
                let y = node
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("softmax value 2-d");
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut d = ndarray::Array2::<T>::zeros(y.raw_dim());
                for (i, (yr, gr)) in y.rows().into_iter().zip(g2.rows()).enumerate() {
                    let dot: T = yr.iter().zip(gr.iter()).fold(T::zero(), |s, (a, b)| s + *a * *b);
                    for (j, (yv, gv)) in yr.iter().zip(gr.iter()).enumerate() {
                        d[[i, j]] = *yv * (*gv - dot);
                    }
                }
                acc(&mut grads[*x], d.into_dyn());
            }
            Op::MeanAll(x) => {
                let vx = &nodes[*x].value;
                let n = T::of_f64(vx.len() as f64);
                let gs = *g.first().unwrap() / n;
                acc(&mut grads[*x], ArrayD::from_elem(vx.raw_dim(), gs));
            }
            Op::SumAll(x) => {
                let vx = &nodes[*x].value;
                let gs = *g.first().unwrap();
                acc(&mut grads[*x], ArrayD::from_elem(vx.raw_dim(), gs));
            }
            Op::AddChan { x, bias } => {
                let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                acc(&mut grads[*bias], gb.into_dyn());
                acc(&mut grads[*x], g);
            }
            Op::MulChan { x, scale } => {
                let vx = &nodes[*x].value;
                let vs = &nodes[*scale].value;
                let c = vx.shape()[1];
                let s3 = vs.view().into_shape_with_order((c, 1, 1)).unwrap();
                let gx = &g * &s3;
                let gs = (&g * &**vx).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                acc(&mut grads[*x], gx);
                acc(&mut grads[*scale], gs.into_dyn());
            }
            Op::AddRow { x, bias } => {
                let gb = g.sum_axis(Axis(0));
                acc(&mut grads[*bias], gb.into_dyn());
                acc(&mut grads[*x], g);
            }
            Op::ScaleNc { x, scale } => {
                let vx = &nodes[*x].value;
                let vs = &nodes[*scale].value;
                let (n, c) = (vx.shape()[0], vx.shape()[1]);
                let s4 = vs.view().into_shape_with_order((n, c, 1, 1)).unwrap();
                let gx = &g * &s4;
                let gs = (&g * &**vx).sum_axis(Axis(3)).sum_axis(Axis(2));
                acc(&mut grads[*x], gx);
                acc(&mut grads[*scale], gs.into_dyn());
            }
            Op::ShiftNc { x, shift } => {
                let gs = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                acc(&mut grads[*shift], gs.into_dyn());
                acc(&mut grads[*x], g);
            }
            Op::MatMul { a, b } => {
                let va = nodes[*a].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let vb = nodes[*b].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut ga = ndarray::Array2::<T>::zeros(va.raw_dim());
                let mut gb = ndarray::Array2::<T>::zeros(vb.raw_dim());
                ndarray::linalg::general_mat_mul(T::one(), &g2, &vb.t(), T::zero(), &mut ga);
                ndarray::linalg::general_mat_mul(T::one(), &va.t(), &g2, T::zero(), &mut gb);
                acc(&mut grads[*a], ga.into_dyn());
                acc(&mut grads[*b], gb.into_dyn());
            }
            Op::BatMatMul { a, b } => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                let mut ga = ArrayD::<T>::zeros(va.raw_dim());
                let mut gb = ArrayD::<T>::zeros(vb.raw_dim());
                for n in 0..va.shape()[0] {
                    let an =
                        va.index_axis(Axis(0), n).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let bn =
                        vb.index_axis(Axis(0), n).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gn =
                        g.index_axis(Axis(0), n).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut gan = ga
                        .index_axis_mut(Axis(0), n)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    let mut gbn = gb
                        .index_axis_mut(Axis(0), n)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    ndarray::linalg::general_mat_mul(T::one(), &gn, &bn.t(), T::zero(), &mut gan);
                    ndarray::linalg::general_mat_mul(T::one(), &an.t(), &gn, T::zero(), &mut gbn);
                }
                acc(&mut grads[*a], ga);
                acc(&mut grads[*b], gb);
            }
            Op::Reshape { x } => {
                let vx = &nodes[*x].value;
                let gx = g.into_shape_with_order(vx.raw_dim()).unwrap();
                acc(&mut grads[*x], gx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let gx = g.view().permuted_axes(inv).as_standard_layout().to_owned();
                acc(&mut grads[*x], gx);
            }
            Op::Concat { xs, axis } => {
                let mut off = 0usize;
                for &xid in xs {
                    let len = nodes[xid].value.shape()[*axis];
                    let part = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(off..off + len))
                        .to_owned();
                    acc(&mut grads[xid], part);
                    off += len;
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let vx = &nodes[*x].value;
                let vw = &nodes[*w].value;
                let (gx, gw) = conv::conv2d_bwd(vx, vw, &g, *stride, *pad);
                acc(&mut grads[*x], gx);
                acc(&mut grads[*w], gw);
            }
            Op::ConvTranspose2d { x, w, stride } => {
                let vx = &nodes[*x].value;
                let vw = &nodes[*w].value;
                let (gx, gw) = conv::convt2d_bwd(vx, vw, &g, *stride);
                acc(&mut grads[*x], gx);
                acc(&mut grads[*w], gw);
            }
            Op::MaxPool2d { x, argmax } => {
                let vx = &nodes[*x].value;
                let gx = pool::max_pool_bwd(vx.raw_dim(), &g, argmax);
                acc(&mut grads[*x], gx);
            }
            Op::AdaptiveAvgPool { x, out_hw } => {
                let vx = &nodes[*x].value;
                let gx = pool::adaptive_avg_pool_bwd(vx.raw_dim(), &g, *out_hw);
                acc(&mut grads[*x], gx);
            }
            Op::GlobalAvgPool { x } => {
                let vx = &nodes[*x].value;
                let gx = pool::global_avg_pool_bwd(vx.raw_dim(), &g);
                acc(&mut grads[*x], gx);
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = dims4(&nodes[*x].value);
                let m = T::of_f64((n * h * w) as f64);
                let vgamma = nodes[*gamma]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let gl = g.index_axis(Axis(1), ci);
                    let xl = xhat.index_axis(Axis(1), ci);
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    ndarray::Zip::from(&gl).and(&xl).for_each(|gv, xv| {
                        sg = sg + *gv;
                        sgx = sgx + *gv * *xv;
                    });
                    dbeta[ci] = sg;
                    dgamma[ci] = sgx;
                }
                let mut gx = g;
                for ci in 0..c {
                    let k = vgamma[ci] * inv_std[ci] / m;
                    let sg = dbeta[ci];
                    let sgx = dgamma[ci];
                    let mut gl = gx.index_axis_mut(Axis(1), ci);
                    let xl = xhat.index_axis(Axis(1), ci);
                    ndarray::Zip::from(&mut gl).and(&xl).for_each(|gv, xv| {
                        *gv = k * (m * *gv - sg - *xv * sgx);
                    });
                }
                acc(&mut grads[*x], gx);
                acc(&mut grads[*gamma], dgamma.into_dyn());
                acc(&mut grads[*beta], dbeta.into_dyn());
            }
        }
    }
    drop(nodes);
    Gradients { grads }
}
