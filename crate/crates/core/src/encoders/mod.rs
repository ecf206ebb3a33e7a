//! Stage-1 feature learning: a compression-insensitive auto-encoder
//! regularized by an adversarial feature discriminator, and a
//! compression-sensitive auto-encoder supervised by a quality-factor
//! classifier. Both share one architecture with independent weights.

mod step;

pub use step::{stage1_step, Stage1Optimizers};

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Scalar, Tx};
use crate::imaging::ImagePair;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Fwd, Linear, ParamStore};

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spatial size {h}x{w} not divisible by {by}")]
    ShapeNotDivisible { h: usize, w: usize, by: usize },
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("guidance length {got} does not match {expected} channels")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(String),
}

/// Uniform channel shrinking for desk-scale runs; full width is 1.0.
pub fn scaled(nominal: usize, width_scale: f64) -> usize {
    ((nominal as f64 * width_scale).round() as usize).max(1)
}

/// Nominal output channels of both feature encoders at full width.
pub const FEATURE_CHANNELS: usize = 2048;

/// Output stride of the feature encoders.
pub const ENCODER_STRIDE: usize = 16;

/// Packs image tensors into a `[N,3,H,W]` batch.
pub fn images_to_batch<'a, T: Scalar, I>(images: I) -> ArrayD<T>
where
    I: IntoIterator<Item = &'a crate::imaging::ImageTensor>,
{
    let imgs: Vec<_> = images.into_iter().collect();
    assert!(!imgs.is_empty());
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut out = ArrayD::<T>::zeros(IxDyn(&[imgs.len(), 3, h, w]));
    for (n, img) in imgs.iter().enumerate() {
        assert_eq!((img.height(), img.width()), (h, w), "batch images must share a shape");
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[n, c, y, x]] = T::of_f64(img.data[[c, y, x]] as f64);
                }
            }
        }
    }
    out
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        mid_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let down = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(store, rng, &format!("{name}.down"), in_ch, out_ch, 1, stride, 0, false),
                BatchNorm2d::new(store, &format!("{name}.down_bn"), out_ch),
            )
        });
        Bottleneck {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, mid_ch, 1, 1, 0, false),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), mid_ch),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), mid_ch, mid_ch, 3, stride, 1, false),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), mid_ch),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), mid_ch, out_ch, 1, 1, 0, false),
            bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out_ch),
            down,
        }
    }

    fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let h = self.conv1.forward(cx, x);
        let h = bn_relu(&self.bn1, cx, h);
        let h = self.conv2.forward(cx, h);
        let h = bn_relu(&self.bn2, cx, h);
        let h = self.conv3.forward(cx, h);
        let h = self.bn3.forward(cx, h);
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x);
                bn.forward(cx, s)
            }
            None => x,
        };
        h.add(shortcut).relu()
    }
}

fn bn_relu<'t, T: Scalar>(
    bn: &BatchNorm2d,
    cx: &mut Fwd<'t, '_, T>,
    x: Tx<'t, T>,
) -> Tx<'t, T> {
    bn.forward(cx, x).relu()
}

/// Modified ResNet-50 trunk: global pooling removed and the final stage
/// kept at stride 1, so features keep a `H/16 x W/16` spatial layout at
/// 2048 (scaled) channels.
pub struct FeatureEncoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
    pub out_channels: usize,
}

impl FeatureEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
    ) -> Self {
        let c64 = scaled(64, width_scale);
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), 3, c64, 7, 2, 3, false);
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.stem_bn"), c64);
        let plan: [(usize, usize, usize, usize); 4] = [
            (3, 64, 256, 1),
            (4, 128, 512, 2),
            (6, 256, 1024, 2),
            // final stage stride 1 keeps the output at 1/16 resolution
            (3, 512, 2048, 1),
        ];
        let mut stages = Vec::new();
        let mut in_ch = c64;
        for (si, (blocks, mid_nom, out_nom, stride)) in plan.into_iter().enumerate() {
            let mid = scaled(mid_nom, width_scale);
            let out = scaled(out_nom, width_scale);
            let mut stage = Vec::new();
            for bi in 0..blocks {
                let s = if bi == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(
                    store,
                    rng,
                    &format!("{name}.stage{}.{}", si + 1, bi),
                    in_ch,
                    mid,
                    out,
                    s,
                ));
                in_ch = out;
            }
            stages.push(stage);
        }
        FeatureEncoder { stem, stem_bn, stages, out_channels: in_ch }
    }

    pub fn check_input(h: usize, w: usize) -> ModelResult<()> {
        if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(ModelError::ShapeNotDivisible { h, w, by: ENCODER_STRIDE });
        }
        Ok(())
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, x: Tx<'t, T>) -> Tx<'t, T> {
        let h = self.stem.forward(cx, x);
        let h = bn_relu(&self.stem_bn, cx, h);
        let mut h = h.max_pool2d(3, 2, 1);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(cx, h);
            }
        }
        h
    }
}

/// 15-layer reconstruction decoder: five 3x3 convolutions, four
/// (2x transpose conv, 3x3 conv) upsampling pairs, then two 3x3
/// convolutions with a sigmoid output. Inverts the encoder's 16x
/// downsampling.
pub struct ReconDecoder {
    head: Vec<(Conv2d, BatchNorm2d)>,
    ups: Vec<(ConvTranspose2d, BatchNorm2d, Conv2d, BatchNorm2d)>,
    tail: (Conv2d, BatchNorm2d),
    last: Conv2d,
}

impl ReconDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
    ) -> Self {
        let s = |c: usize| scaled(c, width_scale);
        let head_plan = [(2048, 512), (512, 512), (512, 256), (256, 256), (256, 128)];
        let mut head = Vec::new();
        for (i, (a, b)) in head_plan.into_iter().enumerate() {
            head.push((
                Conv2d::new(store, rng, &format!("{name}.head{i}"), s(a), s(b), 3, 1, 1, false),
                BatchNorm2d::new(store, &format!("{name}.head{i}_bn"), s(b)),
            ));
        }
        let up_plan = [(128, 64), (64, 32), (32, 16), (16, 8)];
        let mut ups = Vec::new();
        for (i, (a, b)) in up_plan.into_iter().enumerate() {
            ups.push((
                ConvTranspose2d::new(store, rng, &format!("{name}.up{i}"), s(a), s(b), 2, false),
                BatchNorm2d::new(store, &format!("{name}.up{i}_bn"), s(b)),
                Conv2d::new(store, rng, &format!("{name}.post{i}"), s(b), s(b), 3, 1, 1, false),
                BatchNorm2d::new(store, &format!("{name}.post{i}_bn"), s(b)),
            ));
        }
        let tail = (
            Conv2d::new(store, rng, &format!("{name}.tail"), s(8), s(8), 3, 1, 1, false),
            BatchNorm2d::new(store, &format!("{name}.tail_bn"), s(8)),
        );
        let last = Conv2d::new(store, rng, &format!("{name}.out"), s(8), 3, 3, 1, 1, true);
        ReconDecoder { head, ups, tail, last }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, f: Tx<'t, T>) -> Tx<'t, T> {
        let mut h = f;
        for (conv, bn) in &self.head {
            h = conv.forward(cx, h);
            h = bn_relu(bn, cx, h);
        }
        for (up, bn1, conv, bn2) in &self.ups {
            h = up.forward(cx, h);
            h = bn_relu(bn1, cx, h);
            h = conv.forward(cx, h);
            h = bn_relu(bn2, cx, h);
        }
        let (conv, bn) = &self.tail;
        h = conv.forward(cx, h);
        h = bn_relu(bn, cx, h);
        self.last.forward(cx, h).sigmoid()
    }
}

/// Two-layer MLP over globally pooled features, emitting the
/// probability that features came from an uncompressed image.
pub struct Discriminator {
    pub fc1: Linear,
    pub fc2: Linear,
    pub in_channels: usize,
}

impl Discriminator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
    ) -> Self {
        let c = scaled(FEATURE_CHANNELS, width_scale);
        Discriminator {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, c),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), c, 1),
            in_channels: c,
        }
    }

    pub fn check_features(&self, channels: usize) -> ModelResult<()> {
        if channels != self.in_channels {
            return Err(ModelError::ChannelMismatch { expected: self.in_channels, got: channels });
        }
        Ok(())
    }

    /// Raw scores `[N]`; apply sigmoid for probabilities.
    pub fn logits<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, f: Tx<'t, T>) -> Tx<'t, T> {
        let pooled = f.global_avg_pool();
        let h = self.fc1.forward(cx, pooled).relu();
        let n = h.shape()[0];
        self.fc2.forward(cx, h).reshape(&[n])
    }

    pub fn probability<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, f: Tx<'t, T>) -> Tx<'t, T> {
        self.logits(cx, f).sigmoid()
    }
}

pub const QF_CLASSES: usize = 100;

/// Two-layer MLP over globally pooled features, emitting a softmax
/// distribution over the 100 quality-factor classes.
pub struct QfPredictor {
    pub fc1: Linear,
    pub fc2: Linear,
    pub in_channels: usize,
}

impl QfPredictor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
    ) -> Self {
        let c = scaled(FEATURE_CHANNELS, width_scale);
        QfPredictor {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, c),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), c, QF_CLASSES),
            in_channels: c,
        }
    }

    pub fn check_features(&self, channels: usize) -> ModelResult<()> {
        if channels != self.in_channels {
            return Err(ModelError::ChannelMismatch { expected: self.in_channels, got: channels });
        }
        Ok(())
    }

    /// `[N, 100]` probabilities summing to one per row.
    pub fn forward<'t, T: Scalar>(&self, cx: &mut Fwd<'t, '_, T>, f: Tx<'t, T>) -> Tx<'t, T> {
        let pooled = f.global_avg_pool();
        let h = self.fc1.forward(cx, pooled).relu();
        self.fc2.forward(cx, h).softmax_rows()
    }
}

/// Mean absolute error between a reconstruction and its target.
pub fn recon_l1<'t, T: Scalar>(recon: Tx<'t, T>, target: Tx<'t, T>) -> Tx<'t, T> {
    recon.sub(target).abs().mean_all()
}

/// Content constraint over a batch: half the sum of the per-branch
/// reconstruction errors on compressed and original inputs.
pub fn content_loss_terms<'t, T: Scalar>(
    recon_c: Tx<'t, T>,
    c: Tx<'t, T>,
    recon_o: Tx<'t, T>,
    o: Tx<'t, T>,
) -> Tx<'t, T> {
    recon_l1(recon_c, c).add(recon_l1(recon_o, o)).mul_scalar(T::of_f64(0.5))
}

/// Adversarial alignment constraint from discriminator scores on
/// compressed (`logit_c`) and original (`logit_o`) features:
/// `(1/2N) * sum(-log J(c) + log J(o))`.
pub fn insensitive_loss_terms<'t, T: Scalar>(logit_c: Tx<'t, T>, logit_o: Tx<'t, T>) -> Tx<'t, T> {
    let term_c = logit_c.log_sigmoid().mean_all().neg();
    let term_o = logit_o.log_sigmoid().mean_all();
    term_c.add(term_o).mul_scalar(T::of_f64(0.5))
}

/// Quality supervision constraint: `(1/2N) * sum_i(|p_c - t_c|_1 +
/// |p_o - t_o|_1)` with the L1 taken as a sum over the 100 classes.
pub fn sensitive_loss_terms<'t, T: Scalar>(
    pred_c: Tx<'t, T>,
    target_c: Tx<'t, T>,
    pred_o: Tx<'t, T>,
    target_o: Tx<'t, T>,
) -> Tx<'t, T> {
    let n = pred_c.shape()[0];
    let tc = pred_c.sub(target_c).abs().sum_all();
    let to = pred_o.sub(target_o).abs().sum_all();
    tc.add(to).mul_scalar(T::of_f64(0.5 / n as f64))
}

/// One-hot targets for a batch: compressed-side rows use each pair's
/// quality class, original-side rows the quality-100 class.
pub fn qf_targets<T: Scalar>(batch: &[ImagePair]) -> (Array2<T>, Array2<T>) {
    let n = batch.len();
    let mut tc = Array2::<T>::zeros((n, QF_CLASSES));
    let mut to = Array2::<T>::zeros((n, QF_CLASSES));
    for (i, pair) in batch.iter().enumerate() {
        tc[[i, pair.qf.class_index()]] = T::one();
        to[[i, crate::imaging::QfLabel::Original.class_index()]] = T::one();
    }
    (tc, to)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Ci,
    Cs,
}

pub const CI_ENCODER_PREFIX: &str = "ci_encoder.";
pub const CS_ENCODER_PREFIX: &str = "cs_encoder.";

/// The six stage-1 parameter collections.
pub struct DecoupleModel {
    pub ci_encoder: FeatureEncoder,
    pub ci_decoder: ReconDecoder,
    pub discriminator: Discriminator,
    pub cs_encoder: FeatureEncoder,
    pub cs_decoder: ReconDecoder,
    pub qf_predictor: QfPredictor,
    pub width_scale: f64,
}

impl DecoupleModel {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64, width_scale: f64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoupleModel {
            ci_encoder: FeatureEncoder::new(store, &mut rng, "ci_encoder", width_scale),
            ci_decoder: ReconDecoder::new(store, &mut rng, "ci_decoder", width_scale),
            discriminator: Discriminator::new(store, &mut rng, "discriminator", width_scale),
            cs_encoder: FeatureEncoder::new(store, &mut rng, "cs_encoder", width_scale),
            cs_decoder: ReconDecoder::new(store, &mut rng, "cs_decoder", width_scale),
            qf_predictor: QfPredictor::new(store, &mut rng, "qf_predictor", width_scale),
            width_scale,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.ci_encoder.out_channels
    }

    /// Runs one encoder over an image batch without recording gradients.
    pub fn encode_eval<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        which: Which,
        batch: &ArrayD<T>,
    ) -> ModelResult<ArrayD<T>> {
        let (h, w) = (batch.shape()[2], batch.shape()[3]);
        FeatureEncoder::check_input(h, w)?;
        let tape = crate::autodiff::Tape::new();
        let mut cx = Fwd::new(&tape, store, crate::nn::Mode::Eval);
        let x = cx.constant(batch.clone());
        let enc = match which {
            Which::Ci => &self.ci_encoder,
            Which::Cs => &self.cs_encoder,
        };
        let f = enc.forward(&mut cx, x);
        Ok((*f.value()).clone())
    }
}

/// Scalar values of the four stage-1 losses at the pre-update point.
#[derive(Debug, Clone, Copy)]
pub struct StageOneLosses {
    pub l_cc_ci: f64,
    pub l_cic: f64,
    pub l_cc_cs: f64,
    pub l_csc: f64,
}

impl StageOneLosses {
    pub fn all_finite(&self) -> bool {
        self.l_cc_ci.is_finite()
            && self.l_cic.is_finite()
            && self.l_cc_cs.is_finite()
            && self.l_csc.is_finite()
    }
}
