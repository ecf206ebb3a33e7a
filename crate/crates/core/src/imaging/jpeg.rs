//! Reference JPEG degradation through a libjpeg-compatible codec:
//! standard IJG quality scaling with 4:2:0 chroma subsampling on the
//! encode side, so baselines line up with the common toolchains.

use super::{DataError, DataResult, ImageTensor};

/// Encodes `img` as a baseline JPEG at quality `qf` and decodes it
/// back. Output shape equals input shape.
pub fn jpeg_roundtrip(img: &ImageTensor, qf: i64) -> DataResult<ImageTensor> {
    if !(1..=100).contains(&qf) {
        return Err(DataError::InvalidQualityFactor(qf));
    }
    let (h, w) = (img.height(), img.width());
    let rgb = img.to_rgb8();
    let mut encoded = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut encoded, qf as u8);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::F_2_2);
    enc.encode(&rgb, w as u16, h as u16, jpeg_encoder::ColorType::Rgb).map_err(|e| {
        DataError::Decode { path: "<memory>".into(), msg: format!("jpeg encode: {e}") }
    })?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
        .map_err(|e| DataError::Decode {
            path: "<memory>".into(),
            msg: format!("jpeg decode: {e}"),
        })?
        .to_rgb8();
    debug_assert_eq!((decoded.width(), decoded.height()), (w as u32, h as u32));
    Ok(ImageTensor::from_rgb8(h, w, decoded.as_raw()))
}
