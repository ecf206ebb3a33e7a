//! Deterministic procedural RGB images for self-contained tests and
//! desk-scale smoke corpora: gradients, oriented gratings, and soft
//! discs give JPEG something to visibly damage at low quality.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{DataError, DataResult, ImageTensor};

/// One reproducible synthetic image. The same `(seed, h, w)` always
/// yields the same pixels.
pub fn generate_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut data = Array3::<f32>::zeros((3, h, w));

    // base gradient per channel
    let mut base = [[0.0f32; 2]; 3];
    let mut offset = [0.0f32; 3];
    for c in 0..3 {
        base[c] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        offset[c] = rng.random_range(0.25..0.75);
    }

    // oriented gratings shared across channels with per-channel weight
    let n_waves = rng.random_range(3..6);
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..n_waves)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let freq = rng.random_range(0.05..0.45);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = [
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
            ];
            (theta, freq, phase, amp)
        })
        .collect();

    // soft discs with sharp-ish edges
    let n_discs = rng.random_range(2..6);
    let discs: Vec<(f32, f32, f32, [f32; 3])> = (0..n_discs)
        .map(|_| {
            let cy = rng.random_range(0.0..h as f32);
            let cx = rng.random_range(0.0..w as f32);
            let r = rng.random_range(0.08..0.35) * h.min(w) as f32;
            let col = [
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
            ];
            (cy, cx, r, col)
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f32, x as f32);
            for c in 0..3 {
                let mut v = offset[c]
                    + base[c][0] * (fy / h.max(1) as f32)
                    + base[c][1] * (fx / w.max(1) as f32);
                for (theta, freq, phase, amp) in &waves {
                    let u = fx * theta.cos() + fy * theta.sin();
                    v += amp[c] * (u * freq + phase).sin();
                }
                for (cy, cx, r, col) in &discs {
                    let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                    // 1.5px anti-aliased edge
                    let t = ((r - d) / 1.5).clamp(0.0, 1.0);
                    v += col[c] * t;
                }
                data[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor { data }
}

/// Writes `count` synthetic PNGs into `dir` (created if missing),
/// named `synth_####.png`.
pub fn write_corpus(dir: &Path, count: usize, h: usize, w: usize, seed: u64) -> DataResult<usize> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.into(), source: e })?;
    for i in 0..count {
        let img = generate_image(seed.wrapping_add(i as u64), h, w);
        let path = dir.join(format!("synth_{i:04}.png"));
        let buf = image::RgbImage::from_raw(w as u32, h as u32, img.to_rgb8())
            .expect("raw buffer size");
        buf.save(&path)
            .map_err(|e| DataError::Decode { path: path.clone(), msg: e.to_string() })?;
    }
    Ok(count)
}
