//! Image loading, reference JPEG degradation, patch sampling, and
//! paired-batch streaming.

mod dataset;
mod jpeg;

pub mod synth;

use std::path::PathBuf;

use ndarray::Array3;
use thiserror::Error;

pub use dataset::{list_images, load_image, make_pair, sample_patch, PairStream, SampleMode};
pub use jpeg::jpeg_roundtrip;

pub type DataResult<T> = Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("could not decode {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("quality factor {0} outside [1,100]")]
    InvalidQualityFactor(i64),
    #[error("patch size {size} exceeds image dimensions {h}x{w}")]
    PatchTooLarge { size: usize, h: usize, w: usize },
    #[error("no decodable images in {0}")]
    EmptyDataset(PathBuf),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An RGB image as `[3, H, W]` floats in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        assert_eq!(data.shape()[0], 3, "images are 3-channel");
        ImageTensor { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Builds from packed 8-bit RGB rows, scaling by 255.
    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), h * w * 3);
        let mut data = Array3::<f32>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                for c in 0..3 {
                    data[[c, y, x]] = rgb[p + c] as f32 / 255.0;
                }
            }
        }
        ImageTensor { data }
    }

    /// Packs to 8-bit RGB rows, rounding and clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                for c in 0..3 {
                    let v = (self.data[[c, y, x]] * 255.0).round().clamp(0.0, 255.0);
                    out[p + c] = v as u8;
                }
            }
        }
        out
    }

    /// Quantizes through the 8-bit representation, as saving to disk would.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor::from_rgb8(self.height(), self.width(), &self.to_rgb8())
    }

    /// Bilinear resize to `target x target`.
    pub fn resize(&self, target: usize) -> ImageTensor {
        let (h, w) = (self.height(), self.width());
        if h == target && w == target {
            return self.clone();
        }
        let mut out = Array3::<f32>::zeros((3, target, target));
        for oy in 0..target {
            let fy = (oy as f32 + 0.5) * h as f32 / target as f32 - 0.5;
            let y0 = fy.floor().clamp(0.0, (h - 1) as f32) as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = (fy - y0 as f32).clamp(0.0, 1.0);
            for ox in 0..target {
                let fx = (ox as f32 + 0.5) * w as f32 / target as f32 - 0.5;
                let x0 = fx.floor().clamp(0.0, (w - 1) as f32) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = (fx - x0 as f32).clamp(0.0, 1.0);
                for c in 0..3 {
                    let a = self.data[[c, y0, x0]] * (1.0 - wx) + self.data[[c, y0, x1]] * wx;
                    let b = self.data[[c, y1, x0]] * (1.0 - wx) + self.data[[c, y1, x1]] * wx;
                    out[[c, oy, ox]] = a * (1.0 - wy) + b * wy;
                }
            }
        }
        ImageTensor { data: out }
    }

    /// Reflection-pads on the bottom/right so both dimensions become
    /// multiples of `m`; returns the padded image and the original size.
    pub fn pad_to_multiple(&self, m: usize) -> (ImageTensor, (usize, usize)) {
        let (h, w) = (self.height(), self.width());
        let nh = h.div_ceil(m) * m;
        let nw = w.div_ceil(m) * m;
        if nh == h && nw == w {
            return (self.clone(), (h, w));
        }
        let mut out = Array3::<f32>::zeros((3, nh, nw));
        for y in 0..nh {
            let sy = reflect_index(y, h);
            for x in 0..nw {
                let sx = reflect_index(x, w);
                for c in 0..3 {
                    out[[c, y, x]] = self.data[[c, sy, sx]];
                }
            }
        }
        (ImageTensor { data: out }, (h, w))
    }

    pub fn crop(&self, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(self.data.slice(ndarray::s![.., 0..h, 0..w]).to_owned())
    }
}

fn reflect_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // mirror without repeating the edge pixel, clamped for tiny images
        let over = i - n + 1;
        n.saturating_sub(1 + over).min(n - 1)
    }
}

/// Quality-factor label over 100 classes; originals take the class of
/// quality 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QfLabel {
    Quality(u8),
    Original,
}

impl QfLabel {
    pub fn class_index(&self) -> usize {
        match self {
            QfLabel::Quality(q) => {
                debug_assert!((1..=100).contains(q));
                *q as usize - 1
            }
            QfLabel::Original => 99,
        }
    }

    pub fn one_hot(&self) -> ndarray::Array1<f32> {
        let mut v = ndarray::Array1::<f32>::zeros(100);
        v[self.class_index()] = 1.0;
        v
    }
}

/// A compressed/original training or evaluation sample.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub compressed: ImageTensor,
    pub original: ImageTensor,
    pub qf: QfLabel,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_is_valid() {
        for q in 10..=95u8 {
            let v = QfLabel::Quality(q).one_hot();
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
            assert_eq!(v.sum(), 1.0);
            assert_eq!(v[q as usize - 1], 1.0);
        }
        let v = QfLabel::Original.one_hot();
        assert_eq!(v[99], 1.0);
        assert_eq!(v.sum(), 1.0);
    }

    #[test]
    fn rgb8_round_trip_hits_exact_bounds() {
        let rgb = vec![0u8, 128, 255, 255, 0, 64];
        let img = ImageTensor::from_rgb8(1, 2, &rgb);
        assert_eq!(img.data[[2, 0, 0]], 1.0);
        assert_eq!(img.data[[0, 0, 1]], 1.0);
        assert_eq!(img.to_rgb8(), rgb);
    }

    #[test]
    fn pad_and_crop_invert() {
        let mut data = Array3::<f32>::zeros((3, 5, 7));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let img = ImageTensor::new(data);
        let (padded, (h, w)) = img.pad_to_multiple(16);
        assert_eq!(padded.height() % 16, 0);
        assert_eq!(padded.width() % 16, 0);
        assert_eq!(padded.crop(h, w), img);
    }
}
