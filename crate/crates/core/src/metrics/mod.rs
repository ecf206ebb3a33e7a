//! Reference image-quality metrics (PSNR, SSIM, blocking-aware PSNR-B)
//! and dataset-level evaluation reports.
//!
//! All metrics run on `[0,1]` RGB tensors and accumulate in `f64`.
//! Identical inputs report the 100 dB cap rather than infinity.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{jpeg_roundtrip, list_images, load_image, DataError, ImageTensor};

pub type MetricResult<T> = Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("image {h}x{w} smaller than the {min}x{min} SSIM window")]
    ImageTooSmall { h: usize, w: usize, min: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("model failure on {image}: {msg}")]
    Model { image: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// PSNR cap for (near-)identical images, in dB.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const PSNR_B_BLOCK: usize = 8;

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> MetricResult<()> {
    if a.data.shape() != b.data.shape() {
        return Err(MetricError::ShapeMismatch {
            a: a.data.shape().to_vec(),
            b: b.data.shape().to_vec(),
        });
    }
    Ok(())
}

fn mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc / a.data.len() as f64
}

/// Peak signal-to-noise ratio over all RGB values, capped at 100 dB.
pub fn psnr(reference: &ImageTensor, test: &ImageTensor) -> MetricResult<f64> {
    check_shapes(reference, test)?;
    Ok(psnr_from_mse(mse(reference, test)))
}

fn psnr_from_mse(m: f64) -> f64 {
    if m <= 1e-10 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5, K1=0.01,
/// K2=0.03), averaged over valid window positions of all three channels.
pub fn ssim(reference: &ImageTensor, test: &ImageTensor) -> MetricResult<f64> {
    check_shapes(reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall { h, w, min: SSIM_WINDOW });
    }
    let kernel = gaussian_kernel(SSIM_WINDOW, 1.5);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ch in 0..3 {
        let x: Vec<f64> =
            reference.data.index_axis(ndarray::Axis(0), ch).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> =
            test.data.index_axis(ndarray::Axis(0), ch).iter().map(|&v| v as f64).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
        let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
        let mu_x = filter_valid(&x, h, w, &kernel);
        let mu_y = filter_valid(&y, h, w, &kernel);
        let e_xx = filter_valid(&xx, h, w, &kernel);
        let e_yy = filter_valid(&yy, h, w, &kernel);
        let e_xy = filter_valid(&xy, h, w, &kernel);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += s;
        }
        count += mu_x.len();
    }
    Ok(acc / count as f64)
}

/// Separable Gaussian filtering over valid positions only.
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                s += kv * img[y * w + x + j];
            }
            tmp[y * ow + x] = s;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                s += kv * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let mut k: Vec<f64> =
        (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// PSNR penalized by the blocking effect factor of the test image over
/// the 8x8 JPEG grid (Yim & Bovik). BEF is nonnegative, so the result
/// never exceeds [`psnr`].
pub fn psnr_b(reference: &ImageTensor, test: &ImageTensor) -> MetricResult<f64> {
    check_shapes(reference, test)?;
    let m = mse(reference, test);
    let mut bef_acc = 0.0f64;
    for ch in 0..3 {
        bef_acc += blocking_effect_factor(&test.data.index_axis(ndarray::Axis(0), ch));
    }
    Ok(psnr_from_mse(m + bef_acc / 3.0))
}

/// Blocking effect factor of one channel: weighted excess of squared
/// differences across block boundaries over those inside blocks.
fn blocking_effect_factor(img: &ndarray::ArrayView2<'_, f32>) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let b = PSNR_B_BLOCK;
    let mut sum_boundary = 0.0f64;
    let mut n_boundary = 0usize;
    let mut sum_inner = 0.0f64;
    let mut n_inner = 0usize;
    // horizontal neighbor pairs (j, j+1)
    for i in 0..h {
        for j in 0..w - 1 {
            let d = img[[i, j]] as f64 - img[[i, j + 1]] as f64;
            if (j + 1) % b == 0 {
                sum_boundary += d * d;
                n_boundary += 1;
            } else {
                sum_inner += d * d;
                n_inner += 1;
            }
        }
    }
    // vertical neighbor pairs (i, i+1)
    for i in 0..h - 1 {
        for j in 0..w {
            let d = img[[i, j]] as f64 - img[[i + 1, j]] as f64;
            if (i + 1) % b == 0 {
                sum_boundary += d * d;
                n_boundary += 1;
            } else {
                sum_inner += d * d;
                n_inner += 1;
            }
        }
    }
    if n_boundary == 0 || n_inner == 0 {
        return 0.0;
    }
    let d_b = sum_boundary / n_boundary as f64;
    let d_bc = sum_inner / n_inner as f64;
    if d_b <= d_bc {
        return 0.0;
    }
    let eta = (b as f64).log2() / (h.min(w) as f64).log2();
    eta * (d_b - d_bc)
}

/// A restoration model under evaluation: maps a compressed image to a
/// restored image of the same shape.
pub trait Restorer: Sync {
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor, String>;
    fn name(&self) -> &str {
        "model"
    }
}

/// Pass-through model: evaluating it yields the raw JPEG baseline.
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, img: &ImageTensor) -> Result<ImageTensor, String> {
        Ok(img.clone())
    }
    fn name(&self) -> &str {
        "identity"
    }
}

#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_b: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub dataset: String,
    pub qf: i64,
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_psnr_b: f64,
}

impl MetricsReport {
    fn from_rows(dataset: String, qf: i64, per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mean_psnr_b = per_image.iter().map(|r| r.psnr_b).sum::<f64>() / n;
        MetricsReport { dataset, qf, per_image, mean_psnr, mean_ssim, mean_psnr_b }
    }

    /// CSV with one row per image plus a trailing `mean` summary row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "image_id,psnr,ssim,psnr_b")?;
        for r in &self.per_image {
            writeln!(w, "{},{:.6},{:.6},{:.6}", r.image_id, r.psnr, r.ssim, r.psnr_b)?;
        }
        writeln!(w, "mean,{:.6},{:.6},{:.6}", self.mean_psnr, self.mean_ssim, self.mean_psnr_b)
    }
}

/// Compresses every image in `dataset_dir` at `qf`, restores it with
/// `model`, and reports the three metrics against the originals. The
/// restored image is quantized to 8-bit before measurement, matching
/// what saving it to disk would produce.
pub fn evaluate_model(
    model: &dyn Restorer,
    dataset_dir: &Path,
    qf: i64,
) -> MetricResult<MetricsReport> {
    let files = list_images(dataset_dir)?;
    let rows: Vec<MetricResult<ImageMetrics>> = files
        .par_iter()
        .map(|path| {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            let original = load_image(path)?;
            let compressed = jpeg_roundtrip(&original, qf)?;
            let restored = model
                .restore(&compressed)
                .map_err(|msg| MetricError::Model { image: id.clone(), msg })?
                .quantized();
            Ok(ImageMetrics {
                image_id: id,
                psnr: psnr(&original, &restored)?,
                ssim: ssim(&original, &restored)?,
                psnr_b: psnr_b(&original, &restored)?,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<MetricResult<Vec<_>>>()?;
    let dataset = dataset_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dataset_dir.display().to_string());
    Ok(MetricsReport::from_rows(dataset, qf, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synth;
    use ndarray::Array3;

    fn constant(v: f32, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((3, h, w), v))
    }

    /// Deterministic integer test patterns, exactly reproducible in any
    /// language (used to freeze reference values computed with an
    /// independent implementation).
    fn pattern_pair() -> (ImageTensor, ImageTensor) {
        let (h, w) = (40, 56);
        let mut x = Array3::<f32>::zeros((3, h, w));
        let mut y = Array3::<f32>::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                let xv = ((i * 7 + j * 13) % 97) as f32 / 96.0;
                let yv = ((i * 11 + j * 5) % 89) as f32 / 88.0;
                for c in 0..3 {
                    x[[c, i, j]] = xv;
                    y[[c, i, j]] = yv;
                }
            }
        }
        (ImageTensor::new(x), ImageTensor::new(y))
    }

    #[test]
    fn psnr_identity_caps_at_100() {
        let img = synth::generate_image(1, 24, 24);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_closed_form_midgrey() {
        let zero = constant(0.0, 16, 16);
        let mid = constant(128.0 / 255.0, 16, 16);
        let v = psnr(&zero, &mid).unwrap();
        assert!((v - 5.986604215721737).abs() < 1e-6, "psnr {v}");
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = constant(0.1, 8, 8);
        let b = constant(0.1, 8, 9);
        assert!(matches!(psnr(&a, &b), Err(MetricError::ShapeMismatch { .. })));
    }

    #[test]
    fn ssim_identity_is_one() {
        let img = synth::generate_image(2, 32, 32);
        let v = ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "ssim {v}");
    }

    #[test]
    fn ssim_constant_pair_matches_reference() {
        // closed form and an independent reference implementation agree
        // on 0.983609244386166 for constant 0.5 vs 0.6
        let a = constant(0.5, 64, 64);
        let b = constant(0.6, 64, 64);
        let v = ssim(&a, &b).unwrap();
        assert!((v - 0.983609244386166).abs() < 1e-6, "ssim {v}");
    }

    #[test]
    fn ssim_pattern_pair_matches_reference() {
        // value frozen from an independent Gaussian-window SSIM
        let (x, y) = pattern_pair();
        let v = ssim(&x, &y).unwrap();
        assert!((v - 0.02220930246387677).abs() < 1e-5, "ssim {v}");
    }

    #[test]
    fn ssim_too_small_errors() {
        let a = constant(0.5, 10, 32);
        assert!(matches!(ssim(&a, &a), Err(MetricError::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_symmetry() {
        let a = synth::generate_image(3, 24, 40);
        let b = synth::generate_image(4, 24, 40);
        let v1 = ssim(&a, &b).unwrap();
        let v2 = ssim(&b, &a).unwrap();
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn psnr_b_pattern_pair_matches_reference() {
        let (x, y) = pattern_pair();
        let p = psnr(&x, &y).unwrap();
        let pb = psnr_b(&x, &y).unwrap();
        assert!((p - 7.688758064130242).abs() < 1e-5, "psnr {p}");
        assert!((pb - 7.512732148858689).abs() < 1e-5, "psnr_b {pb}");
    }

    #[test]
    fn psnr_b_constant_pair_equals_psnr() {
        let a = constant(0.3, 24, 24);
        let b = constant(0.45, 24, 24);
        let p = psnr(&a, &b).unwrap();
        let pb = psnr_b(&a, &b).unwrap();
        assert_eq!(p, pb);
        assert!((p - 16.478174818886373).abs() < 1e-5);
    }

    #[test]
    fn psnr_b_penalizes_block_boundary_steps() {
        // columns alternate 0.4/0.6 in 8-wide bands: every step sits on a
        // block boundary, so psnr_b must fall strictly below psnr
        let mut t = Array3::<f32>::zeros((3, 32, 32));
        for j in 0..32 {
            let v = if (j / 8) % 2 == 0 { 0.4 } else { 0.6 };
            for c in 0..3 {
                for i in 0..32 {
                    t[[c, i, j]] = v;
                }
            }
        }
        let test = ImageTensor::new(t);
        let reference = constant(0.5, 32, 32);
        let p = psnr(&reference, &test).unwrap();
        let pb = psnr_b(&reference, &test).unwrap();
        assert!((p - 20.0).abs() < 1e-6);
        assert!((pb - 16.57577319177794).abs() < 1e-5, "psnr_b {pb}");
        assert!(pb < p);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = synth::generate_image(9, 48, 48);
        let noisy = |amp: f32| {
            let mut d = base.data.clone();
            for (i, v) in d.iter_mut().enumerate() {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                *v = (*v + s * amp).clamp(0.0, 1.0);
            }
            ImageTensor::new(d)
        };
        let p1 = psnr(&base, &noisy(0.01)).unwrap();
        let p2 = psnr(&base, &noisy(0.02)).unwrap();
        let p4 = psnr(&base, &noisy(0.04)).unwrap();
        assert!(p1 > p2 && p2 > p4, "{p1} {p2} {p4}");
    }

    #[test]
    fn evaluate_oracle_model_saturates() {
        // a one-image dataset lets the oracle hand back the original
        let dir = tempfile::tempdir().unwrap();
        synth::write_corpus(dir.path(), 1, 32, 32, 77).unwrap();
        let original = load_image(&list_images(dir.path()).unwrap()[0]).unwrap();

        struct Oracle(ImageTensor);
        impl Restorer for Oracle {
            fn restore(&self, _img: &ImageTensor) -> Result<ImageTensor, String> {
                Ok(self.0.clone())
            }
        }
        let report = evaluate_model(&Oracle(original), dir.path(), 10).unwrap();
        assert_eq!(report.per_image.len(), 1);
        assert_eq!(report.per_image[0].psnr, 100.0);
        assert!((report.per_image[0].ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_report_means_match_rows() {
        let dir = tempfile::tempdir().unwrap();
        synth::write_corpus(dir.path(), 4, 40, 40, 5).unwrap();
        let report = evaluate_model(&Identity, dir.path(), 10).unwrap();
        assert_eq!(report.per_image.len(), 4);
        let n = report.per_image.len() as f64;
        let mp = report.per_image.iter().map(|r| r.psnr).sum::<f64>() / n;
        let ms = report.per_image.iter().map(|r| r.ssim).sum::<f64>() / n;
        let mb = report.per_image.iter().map(|r| r.psnr_b).sum::<f64>() / n;
        assert!((mp - report.mean_psnr).abs() < 1e-9);
        assert!((ms - report.mean_ssim).abs() < 1e-9);
        assert!((mb - report.mean_psnr_b).abs() < 1e-9);
        for r in &report.per_image {
            assert!(r.psnr_b <= r.psnr + 1e-12);
        }
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 1);
    }
}
