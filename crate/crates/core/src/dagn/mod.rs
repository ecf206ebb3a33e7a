//! The guided restoration network: a four-scale residual base encoder,
//! two guidance MLPs that turn decoupled features into per-scale
//! channel transforms, a pyramid-pooled cross-feature fusion module at
//! the bottleneck, and a guided decoder whose upper scales apply four
//! sensitive-guided then four insensitive-guided residual transforms.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tx};
use crate::encoders::{scaled, ModelError, ModelResult, FEATURE_CHANNELS};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Fwd, Linear, ParamStore, ResBlock};

/// Channel plan of the base encoder / guided decoder at full width.
pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

/// Embedding dimension of the guidance trunk at full width; per-scale
/// guidance vectors have length `D / 2^i` for scales i = 1, 2, 3.
pub const GUIDANCE_DIM: usize = 512;

/// Pyramid pooling output sizes; flattened they span 85 positions.
pub const PYRAMID_POOL_SIZES: [usize; 4] = [1, 2, 4, 8];

pub fn pyramid_positions() -> usize {
    PYRAMID_POOL_SIZES.iter().map(|k| k * k).sum()
}

/// Which components of the network are learned; disabled guidance uses
/// constants instead (see [`GuidanceDisable`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Base encoder and guided decoder only.
    Baseline,
    /// Adds the insensitive guidance MLP.
    Cigm,
    /// Adds the sensitive guidance MLP.
    Csgm,
    /// Adds the cross-feature fusion module.
    Cfm,
    /// Everything.
    Full,
}

impl Variant {
    pub fn parse(name: &str) -> Option<Variant> {
        Some(match name {
            "baseline" => Variant::Baseline,
            "cigm" => Variant::Cigm,
            "csgm" => Variant::Csgm,
            "cfm" => Variant::Cfm,
            "full" => Variant::Full,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cigm => "cigm",
            Variant::Csgm => "csgm",
            Variant::Cfm => "cfm",
            Variant::Full => "full",
        }
    }

    pub fn all() -> [Variant; 5] {
        [Variant::Baseline, Variant::Cigm, Variant::Csgm, Variant::Cfm, Variant::Full]
    }

    pub fn uses_cfm(&self) -> bool {
        matches!(self, Variant::Cfm | Variant::Full)
    }

    pub fn uses_ci_guider(&self) -> bool {
        matches!(self, Variant::Cigm | Variant::Full)
    }

    pub fn uses_cs_guider(&self) -> bool {
        matches!(self, Variant::Csgm | Variant::Full)
    }
}

/// Constants substituted for disabled guidance: zero scales with either
/// all-ones biases (the ablation convention) or zero biases (true
/// identity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceDisable {
    ZeroOnes,
    ZeroZeros,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DagnConfig {
    pub width_scale: f64,
    pub variant: Variant,
    pub disable_mode: GuidanceDisable,
}

impl DagnConfig {
    pub fn full(width_scale: f64) -> Self {
        DagnConfig { width_scale, variant: Variant::Full, disable_mode: GuidanceDisable::ZeroOnes }
    }

    pub fn with_variant(width_scale: f64, variant: Variant) -> Self {
        DagnConfig { width_scale, variant, disable_mode: GuidanceDisable::ZeroOnes }
    }
}

/// Multi-scale output of the base encoder: one skip per scale plus the
/// deepest features.
pub struct EncodedPyramid<'t, T: Scalar> {
    pub skips: Vec<Tx<'t, T>>,
    pub bottleneck: Tx<'t, T>,
}

/// Four residual scales with stride-2 downscaling convolutions between
/// them; every scale taps a skip connection after its blocks.
pub struct BaseEncoder {
    stem: Conv2d,
    scales: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
}

impl BaseEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
    ) -> Self {
        let chans: Vec<usize> = BASE_CHANNELS.iter().map(|&c| scaled(c, width_scale)).collect();
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), 3, chans[0], 3, 1, 1, true);
        let mut scales = Vec::new();
        for (si, &ch) in chans.iter().enumerate() {
            let blocks = (0..4)
                .map(|bi| ResBlock::new(store, rng, &format!("{name}.scale{si}.block{bi}"), ch))
                .collect();
            let down = (si + 1 < chans.len()).then(|| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.scale{si}.down"),
                    ch,
                    chans[si + 1],
                    2,
                    2,
                    0,
                    true,
                )
            });
            scales.push((blocks, down));
        }
        BaseEncoder { stem, scales }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        x: Tx<'t, T>,
    ) -> EncodedPyramid<'t, T> {
        let mut h = self.stem.forward(cx, x);
        let mut skips = Vec::with_capacity(4);
        for (blocks, down) in &self.scales {
            for b in blocks {
                h = b.forward(cx, h);
            }
            skips.push(h);
            if let Some(d) = down {
                h = d.forward(cx, h);
            }
        }
        EncodedPyramid { bottleneck: *skips.last().unwrap(), skips }
    }
}

/// Three-layer MLP over globally pooled features: a shared two-layer
/// trunk and per-scale heads emitting a (scale, bias) vector pair.
pub struct GuidanceMlp {
    fc1: Linear,
    fc2: Linear,
    pub heads: Vec<(Linear, Linear)>,
    pub in_channels: usize,
}

impl GuidanceMlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
        head_lens: &[usize],
    ) -> Self {
        let c = scaled(FEATURE_CHANNELS, width_scale);
        let d = scaled(GUIDANCE_DIM, width_scale);
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), c, d);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), d, d);
        let heads = head_lens
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                (
                    Linear::new(store, rng, &format!("{name}.scale_head{i}"), d, len),
                    Linear::new(store, rng, &format!("{name}.bias_head{i}"), d, len),
                )
            })
            .collect();
        GuidanceMlp { fc1, fc2, heads, in_channels: c }
    }

    pub fn check_features(&self, channels: usize) -> ModelResult<()> {
        if channels != self.in_channels {
            return Err(ModelError::ChannelMismatch { expected: self.in_channels, got: channels });
        }
        Ok(())
    }

    /// Per-scale `(scale, bias)` pairs, each `[N, len_i]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        f: Tx<'t, T>,
    ) -> Vec<(Tx<'t, T>, Tx<'t, T>)> {
        let pooled = f.global_avg_pool();
        let h = self.fc1.forward(cx, pooled).relu();
        let h2 = self.fc2.forward(cx, h).relu();
        self.heads.iter().map(|(sh, bh)| (sh.forward(cx, h2), bh.forward(cx, h2))).collect()
    }
}

/// Cross-feature fusion: projects both feature spaces to the base
/// width, pyramid-pools the projected guidance features to 85 flat
/// positions, and adds the similarity-weighted combination back onto
/// the base features.
pub struct CrossFusion {
    pub proj_sim: Conv2d,
    pub proj_val: Conv2d,
    pub proj_base: Conv2d,
}

impl CrossFusion {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width_scale: f64,
        base_ch: usize,
    ) -> Self {
        let c = scaled(FEATURE_CHANNELS, width_scale);
        CrossFusion {
            proj_sim: Conv2d::new(store, rng, &format!("{name}.proj_sim"), c, base_ch, 1, 1, 0, true),
            proj_val: Conv2d::new(store, rng, &format!("{name}.proj_val"), c, base_ch, 1, 1, 0, true),
            proj_base: Conv2d::new(store, rng, &format!("{name}.proj_base"), base_ch, base_ch, 1, 1, 0, true),
        }
    }

    /// Adaptive pools to 1/2/4/8 concatenated along a flattened spatial
    /// axis: `[N, C, 85]`.
    pub fn pool_pyramid<'t, T: Scalar>(x: Tx<'t, T>) -> Tx<'t, T> {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let parts: Vec<Tx<'t, T>> = PYRAMID_POOL_SIZES
            .iter()
            .map(|&k| x.adaptive_avg_pool2d(k).reshape(&[n, c, k * k]))
            .collect();
        Tx::concat(&parts, 2)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        f_cif: Tx<'t, T>,
        f_bf: Tx<'t, T>,
    ) -> Tx<'t, T> {
        let (n, cb, hb, wb) = {
            let s = f_bf.shape();
            (s[0], s[1], s[2], s[3])
        };
        let sim_feats = self.proj_sim.forward(cx, f_cif);
        let val_feats = self.proj_val.forward(cx, f_cif);
        let base = self.proj_base.forward(cx, f_bf);
        let pooled_sim = Self::pool_pyramid(sim_feats); // [N, Cb, 85]
        let pooled_val = Self::pool_pyramid(val_feats); // [N, Cb, 85]
        let base_flat = base.reshape(&[n, cb, hb * wb]).permute(&[0, 2, 1]); // [N, HW, Cb]
        let sim = base_flat.bmm(pooled_sim); // [N, HW, 85]
        let fused = sim.bmm(pooled_val.permute(&[0, 2, 1])); // [N, HW, Cb]
        let fused = fused.permute(&[0, 2, 1]).reshape(&[n, cb, hb, wb]);
        fused.add(f_bf)
    }
}

/// Residual transform whose branch is scaled and shifted channel-wise
/// by externally supplied guidance vectors.
pub struct GuidedBlock {
    conv1: Conv2d,
    bn: BatchNorm2d,
    conv2: Conv2d,
}

impl GuidedBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        GuidedBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1, false),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), ch),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1, true),
        }
    }

    /// `x + scale (.) conv(relu(bn(conv(x)))) + bias`, with `scale` and
    /// `bias` of shape `[N, C]` applied channel-wise.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        x: Tx<'t, T>,
        scale: Tx<'t, T>,
        bias: Tx<'t, T>,
    ) -> ModelResult<Tx<'t, T>> {
        let ch = x.shape()[1];
        if scale.shape()[1] != ch || bias.shape()[1] != ch {
            return Err(ModelError::LengthMismatch { expected: ch, got: scale.shape()[1] });
        }
        let b = self.conv1.forward(cx, x);
        let b = self.bn.forward(cx, b).relu();
        let b = self.conv2.forward(cx, b);
        Ok(x.add(b.scale_nc(scale)).shift_nc(bias))
    }
}

/// One guided decoder scale: skip-sum, 2x transpose-conv upsampling
/// with channel halving, then four sensitive-guided and four
/// insensitive-guided blocks.
pub struct Dagb {
    pub up: ConvTranspose2d,
    pub csg: Vec<GuidedBlock>,
    pub cig: Vec<GuidedBlock>,
}

impl Dagb {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        Dagb {
            up: ConvTranspose2d::new(store, rng, &format!("{name}.up"), in_ch, out_ch, 2, true),
            csg: (0..4)
                .map(|i| GuidedBlock::new(store, rng, &format!("{name}.csg{i}"), out_ch))
                .collect(),
            cig: (0..4)
                .map(|i| GuidedBlock::new(store, rng, &format!("{name}.cig{i}"), out_ch))
                .collect(),
        }
    }

    /// All four sensitive blocks share `(eps, eta)` and all four
    /// insensitive blocks share `(beta, gamma)`; sensitive blocks run
    /// first per the nesting of the dual-guidance transform.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        f_in: Tx<'t, T>,
        f_sc: Tx<'t, T>,
        eps: Tx<'t, T>,
        eta: Tx<'t, T>,
        beta: Tx<'t, T>,
        gamma: Tx<'t, T>,
    ) -> ModelResult<Tx<'t, T>> {
        if f_in.shape() != f_sc.shape() {
            return Err(ModelError::ShapeMismatch { a: f_in.shape(), b: f_sc.shape() });
        }
        let mut x = self.up.forward(cx, f_in.add(f_sc));
        for b in &self.csg {
            x = b.forward(cx, x, eps, eta)?;
        }
        for b in &self.cig {
            x = b.forward(cx, x, beta, gamma)?;
        }
        Ok(x)
    }
}

/// Name prefix of every restoration-network parameter (the trainable
/// set of stage 2).
pub const DAGN_PREFIX: &str = "dagn.";

pub struct Dagn {
    pub cfg: DagnConfig,
    base: BaseEncoder,
    dec1: Vec<ResBlock>,
    dagbs: Vec<Dagb>,
    pub final_conv: Conv2d,
    cfm: Option<CrossFusion>,
    ci_guider: Option<GuidanceMlp>,
    cs_guider: Option<GuidanceMlp>,
    pub feature_channels: usize,
    pub guided_channels: [usize; 3],
}

impl Dagn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: DagnConfig) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.width_scale;
        let chans: Vec<usize> = BASE_CHANNELS.iter().map(|&c| scaled(c, w)).collect();
        let guided = [chans[2], chans[1], chans[0]];
        let base = BaseEncoder::new(store, &mut rng, "dagn.base", w);
        let dec1 = (0..4)
            .map(|i| ResBlock::new(store, &mut rng, &format!("dagn.dec1.block{i}"), chans[3]))
            .collect();
        let dagbs = vec![
            Dagb::new(store, &mut rng, "dagn.dagb0", chans[3], chans[2]),
            Dagb::new(store, &mut rng, "dagn.dagb1", chans[2], chans[1]),
            Dagb::new(store, &mut rng, "dagn.dagb2", chans[1], chans[0]),
        ];
        let final_conv = Conv2d::new(store, &mut rng, "dagn.final", chans[0], 3, 3, 1, 1, true);
        let cfm = cfg
            .variant
            .uses_cfm()
            .then(|| CrossFusion::new(store, &mut rng, "dagn.cfm", w, chans[3]));
        let ci_guider = cfg
            .variant
            .uses_ci_guider()
            .then(|| GuidanceMlp::new(store, &mut rng, "dagn.ci_guider", w, &guided));
        let cs_guider = cfg
            .variant
            .uses_cs_guider()
            .then(|| GuidanceMlp::new(store, &mut rng, "dagn.cs_guider", w, &guided));
        // At full width the guidance lengths are exactly D/2^i; the
        // construction above guarantees they match the decoder widths for
        // any scale factor, which is what the blocks assert at use time.
        debug_assert!(
            w != 1.0
                || guided
                    .iter()
                    .enumerate()
                    .all(|(i, &len)| len == GUIDANCE_DIM >> (i + 1))
        );
        Dagn {
            cfg,
            base,
            dec1,
            dagbs,
            final_conv,
            cfm,
            ci_guider,
            cs_guider,
            feature_channels: scaled(FEATURE_CHANNELS, w),
            guided_channels: guided,
        }
    }

    pub fn needs_ci_features(&self) -> bool {
        self.cfm.is_some() || self.ci_guider.is_some()
    }

    pub fn needs_cs_features(&self) -> bool {
        self.cs_guider.is_some()
    }

    fn constant_guidance<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        n: usize,
    ) -> Vec<(Tx<'t, T>, Tx<'t, T>)> {
        self.guided_channels
            .iter()
            .map(|&len| {
                let zeros = cx.constant(ArrayD::zeros(IxDyn(&[n, len])));
                let bias = match self.cfg.disable_mode {
                    GuidanceDisable::ZeroOnes => {
                        cx.constant(ArrayD::from_elem(IxDyn(&[n, len]), T::one()))
                    }
                    GuidanceDisable::ZeroZeros => cx.constant(ArrayD::zeros(IxDyn(&[n, len]))),
                };
                (zeros, bias)
            })
            .collect()
    }

    fn missing_features(&self) -> ModelError {
        ModelError::ChannelMismatch { expected: self.feature_channels, got: 0 }
    }

    /// Full forward pass over a `[N,3,H,W]` batch (H, W multiples of 8).
    /// `f_cif`/`f_csf` carry the frozen encoders' outputs as constants;
    /// each is required exactly when the variant consumes it.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &mut Fwd<'t, '_, T>,
        img: Tx<'t, T>,
        f_cif: Option<Tx<'t, T>>,
        f_csf: Option<Tx<'t, T>>,
    ) -> ModelResult<Tx<'t, T>> {
        let (n, h, w) = {
            let s = img.shape();
            (s[0], s[2], s[3])
        };
        if h % 8 != 0 || w % 8 != 0 {
            return Err(ModelError::ShapeNotDivisible { h, w, by: 8 });
        }
        for f in [&f_cif, &f_csf].into_iter().flatten() {
            if f.shape()[1] != self.feature_channels {
                return Err(ModelError::ChannelMismatch {
                    expected: self.feature_channels,
                    got: f.shape()[1],
                });
            }
        }
        let pyramid = self.base.forward(cx, img);
        let mut x = match (&self.cfm, f_cif) {
            (Some(cfm), Some(f)) => cfm.forward(cx, f, pyramid.bottleneck),
            (Some(_), None) => return Err(self.missing_features()),
            (None, _) => pyramid.bottleneck,
        };
        for b in &self.dec1 {
            x = b.forward(cx, x);
        }
        let insens = match (&self.ci_guider, f_cif) {
            (Some(g), Some(f)) => g.forward(cx, f),
            (Some(_), None) => return Err(self.missing_features()),
            (None, _) => self.constant_guidance(cx, n),
        };
        let sens = match (&self.cs_guider, f_csf) {
            (Some(g), Some(f)) => g.forward(cx, f),
            (Some(_), None) => return Err(self.missing_features()),
            (None, _) => self.constant_guidance(cx, n),
        };
        // skips pair deepest-first: encoder scale 4 feeds the first
        // guided decoder scale, then 3, then 2
        for (i, dagb) in self.dagbs.iter().enumerate() {
            let skip = pyramid.skips[3 - i];
            let (eps, eta) = sens[i];
            let (beta, gamma) = insens[i];
            x = dagb.forward(cx, x, skip, eps, eta, beta, gamma)?;
        }
        Ok(self.final_conv.forward(cx, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;

    const W: f64 = 1.0 / 32.0;

    fn store_and<T: Scalar, R>(
        f: impl FnOnce(&mut ParamStore<T>, &mut ChaCha8Rng) -> R,
    ) -> (ParamStore<T>, R) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = f(&mut store, &mut rng);
        (store, r)
    }

    fn filled(shape: &[usize], gen: impl Fn(usize) -> f32) -> ArrayD<f32> {
        let mut a = ArrayD::zeros(IxDyn(shape));
        for (i, v) in a.iter_mut().enumerate() {
            *v = gen(i);
        }
        a
    }

    fn img_batch(n: usize, h: usize, w: usize) -> ArrayD<f32> {
        filled(&[n, 3, h, w], |i| ((i * 31 + 7) % 101) as f32 / 101.0)
    }

    #[test]
    fn base_encoder_pyramid_shapes() {
        let (mut store, enc) = store_and(|s, r| BaseEncoder::new(s, r, "dagn.base", W));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let x = cx.constant(img_batch(1, 96, 96));
        let p = enc.forward(&mut cx, x);
        assert_eq!(p.skips.len(), 4);
        let expect: Vec<Vec<usize>> = vec![
            vec![1, scaled(64, W), 96, 96],
            vec![1, scaled(128, W), 48, 48],
            vec![1, scaled(256, W), 24, 24],
            vec![1, scaled(512, W), 12, 12],
        ];
        for (skip, e) in p.skips.iter().zip(&expect) {
            assert_eq!(&skip.shape(), e);
        }
        assert_eq!(p.bottleneck.shape(), expect[3]);
    }

    #[test]
    fn guidance_heads_emit_scale_matched_lengths() {
        let lens = [scaled(256, W), scaled(128, W), scaled(64, W)];
        let (mut store, g) = store_and(|s, r| GuidanceMlp::new(s, r, "dagn.ci_guider", W, &lens));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let c = scaled(FEATURE_CHANNELS, W);
        let f = cx.constant(ArrayD::from_elem(IxDyn(&[2, c, 6, 6]), 0.3f32));
        let out = g.forward(&mut cx, f);
        assert_eq!(out.len(), 3);
        for ((s, b), &len) in out.iter().zip(&lens) {
            assert_eq!(s.shape(), vec![2, len]);
            assert_eq!(b.shape(), vec![2, len]);
        }
        // same features twice -> identical outputs
        let f2 = cx.constant(ArrayD::from_elem(IxDyn(&[2, c, 6, 6]), 0.3f32));
        let out2 = g.forward(&mut cx, f2);
        for ((a, _), (b, _)) in out.iter().zip(out2.iter()) {
            assert_eq!(*a.value(), *b.value());
        }
        assert!(matches!(g.check_features(c + 1), Err(ModelError::ChannelMismatch { .. })));
    }

    #[test]
    fn guidance_zero_heads_emit_zeros() {
        let lens = [4usize, 2, 1];
        let (mut store, g) = store_and(|s, r| GuidanceMlp::new(s, r, "g", 1.0 / 128.0, &lens));
        for (sh, bh) in &g.heads {
            for lin in [sh, bh] {
                store.set_value(lin.w, ArrayD::zeros(store.entry(lin.w).value.raw_dim()));
                store.set_value(lin.b, ArrayD::zeros(store.entry(lin.b).value.raw_dim()));
            }
        }
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let c = scaled(FEATURE_CHANNELS, 1.0 / 128.0);
        let f = cx.constant(ArrayD::from_elem(IxDyn(&[1, c, 2, 2]), 0.7f32));
        for (s, b) in g.forward(&mut cx, f) {
            assert!(s.value().iter().all(|&v| v == 0.0));
            assert!(b.value().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pyramid_pooling_spans_85_positions() {
        assert_eq!(pyramid_positions(), 85);
        let cb = scaled(512, W);
        let (mut store, cfm) = store_and(|s, r| CrossFusion::new(s, r, "dagn.cfm", W, cb));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let c = scaled(FEATURE_CHANNELS, W);
        let f_cif = cx.constant(ArrayD::from_elem(IxDyn(&[1, c, 6, 6]), 0.2f32));
        let proj = cfm.proj_sim.forward(&mut cx, f_cif);
        let pooled = CrossFusion::pool_pyramid(proj);
        assert_eq!(pooled.shape(), vec![1, cb, 85]);
    }

    #[test]
    fn cfm_zero_projections_pass_base_through() {
        let cb = scaled(512, W);
        let (mut store, cfm) = store_and(|s, r| CrossFusion::new(s, r, "dagn.cfm", W, cb));
        for conv in [&cfm.proj_sim, &cfm.proj_val, &cfm.proj_base] {
            store.set_value(conv.w, ArrayD::zeros(store.entry(conv.w).value.raw_dim()));
            if let Some(b) = conv.b {
                store.set_value(b, ArrayD::zeros(store.entry(b).value.raw_dim()));
            }
        }
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let c = scaled(FEATURE_CHANNELS, W);
        let f_cif = cx.constant(ArrayD::from_elem(IxDyn(&[1, c, 6, 6]), 0.4f32));
        let f_bf = cx.constant(filled(&[1, cb, 12, 12], |i| ((i * 13 + 3) % 89) as f32 / 89.0));
        let out = cfm.forward(&mut cx, f_cif, f_bf);
        assert_eq!(*out.value(), *f_bf.value());
    }

    #[test]
    fn cfm_shape_trace() {
        let cb = scaled(512, W);
        let (mut store, cfm) = store_and(|s, r| CrossFusion::new(s, r, "dagn.cfm", W, cb));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let c = scaled(FEATURE_CHANNELS, W);
        let f_cif = cx.constant(ArrayD::from_elem(IxDyn(&[2, c, 6, 6]), 0.4f32));
        let f_bf = cx.constant(ArrayD::from_elem(IxDyn(&[2, cb, 12, 12]), 0.6f32));
        let out = cfm.forward(&mut cx, f_cif, f_bf);
        assert_eq!(out.shape(), vec![2, cb, 12, 12]);
    }

    #[test]
    fn guided_block_identity_and_shift() {
        let ch = 8usize;
        let (mut store, block) = store_and(|s, r| GuidedBlock::new(s, r, "b", ch));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let x = cx.constant(filled(&[2, ch, 5, 5], |i| ((i * 7 + 1) % 23) as f32 / 23.0));
        let zeros = cx.constant(ArrayD::zeros(IxDyn(&[2, ch])));
        let ones = cx.constant(ArrayD::from_elem(IxDyn(&[2, ch]), 1.0f32));
        // scale 0, bias 0 -> identity
        let y = block.forward(&mut cx, x, zeros, zeros).unwrap();
        assert_eq!(*y.value(), *x.value());
        // scale 0, bias 1 -> x + 1 elementwise
        let y = block.forward(&mut cx, x, zeros, ones).unwrap();
        let expect = x.value().mapv(|v| v + 1.0);
        assert_eq!(*y.value(), expect);
        // wrong guidance length
        let bad = cx.constant(ArrayD::zeros(IxDyn(&[2, ch + 1])));
        assert!(matches!(
            block.forward(&mut cx, x, bad, zeros),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dagb_upsamples_and_composes_sensitive_first() {
        let (in_ch, out_ch) = (scaled(512, W), scaled(256, W));
        let (mut store, dagb) = store_and(|s, r| Dagb::new(s, r, "d", in_ch, out_ch));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let f_in = cx.constant(ArrayD::from_elem(IxDyn(&[1, in_ch, 12, 12]), 0.3f32));
        let f_sc = cx.constant(ArrayD::from_elem(IxDyn(&[1, in_ch, 12, 12]), 0.1f32));
        let mk = |v: f32| ArrayD::from_elem(IxDyn(&[1, out_ch]), v);
        let eps = cx.constant(mk(0.5));
        let eta = cx.constant(mk(-0.25));
        let beta = cx.constant(mk(-0.75));
        let gamma = cx.constant(mk(0.125));
        let y = dagb.forward(&mut cx, f_in, f_sc, eps, eta, beta, gamma).unwrap();
        assert_eq!(y.shape(), vec![1, out_ch, 24, 24]);

        // recompose by hand: upsample, four sensitive blocks, then four
        // insensitive blocks; must match bit for bit
        let mut x = dagb.up.forward(&mut cx, f_in.add(f_sc));
        for b in &dagb.csg {
            x = b.forward(&mut cx, x, eps, eta).unwrap();
        }
        for b in &dagb.cig {
            x = b.forward(&mut cx, x, beta, gamma).unwrap();
        }
        assert_eq!(*y.value(), *x.value());

        let bad = cx.constant(ArrayD::zeros(IxDyn(&[1, in_ch, 6, 6])));
        assert!(matches!(
            dagb.forward(&mut cx, f_in, bad, eps, eta, beta, gamma),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dagn_forward_preserves_shape() {
        let mut store = ParamStore::new();
        let net = Dagn::new(&mut store, 11, DagnConfig::full(W));
        let fc = net.feature_channels;
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let img = cx.constant(img_batch(1, 96, 96));
        let f_cif = cx.constant(ArrayD::from_elem(IxDyn(&[1, fc, 6, 6]), 0.2f32));
        let f_csf = cx.constant(ArrayD::from_elem(IxDyn(&[1, fc, 6, 6]), 0.6f32));
        let out = net.forward(&mut cx, img, Some(f_cif), Some(f_csf)).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 96, 96]);
    }

    #[test]
    fn dagn_zero_final_conv_gives_constant_output() {
        let mut store = ParamStore::new();
        let net = Dagn::new(
            &mut store,
            12,
            DagnConfig::with_variant(W, Variant::Baseline),
        );
        store.set_value(net.final_conv.w, ArrayD::zeros(store.entry(net.final_conv.w).value.raw_dim()));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let img = cx.constant(img_batch(1, 32, 32));
        let out = net.forward(&mut cx, img, None, None).unwrap();
        let v = out.value();
        let first = *v.first().unwrap();
        assert!(v.iter().all(|&x| x == first));
    }

    #[test]
    fn dagn_rejects_unaligned_and_missing_features() {
        let mut store = ParamStore::new();
        let net = Dagn::new(&mut store, 13, DagnConfig::full(W));
        let tape = Tape::new();
        let mut cx = Fwd::new(&tape, &mut store, Mode::Eval);
        let img = cx.constant(img_batch(1, 30, 32));
        assert!(matches!(
            net.forward(&mut cx, img, None, None),
            Err(ModelError::ShapeNotDivisible { .. })
        ));
        let img = cx.constant(img_batch(1, 32, 32));
        assert!(matches!(
            net.forward(&mut cx, img, None, None),
            Err(ModelError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn variant_parameter_counts_strictly_increase() {
        let count = |variant: Variant| -> usize {
            let mut store: ParamStore<f32> = ParamStore::new();
            let _ = Dagn::new(&mut store, 1, DagnConfig::with_variant(W, variant));
            store.param_count_under(DAGN_PREFIX)
        };
        let baseline = count(Variant::Baseline);
        let cigm = count(Variant::Cigm);
        let csgm = count(Variant::Csgm);
        let cfm = count(Variant::Cfm);
        let full = count(Variant::Full);
        assert!(baseline < cigm && baseline < csgm && baseline < cfm);
        assert!(cigm < full && csgm < full && cfm < full);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for v in Variant::all() {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
        assert_eq!(Variant::parse("bogus"), None);
    }
}
