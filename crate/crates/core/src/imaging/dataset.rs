//! Image IO, patch sampling, pairing, and deterministic batch streams.

use std::path::{Path, PathBuf};

use ndarray::s;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{jpeg_roundtrip, DataError, DataResult, ImagePair, ImageTensor, QfLabel};

/// Loads a PNG or JPEG as an RGB tensor in `[0,1]`. Greyscale images
/// are replicated to three channels.
pub fn load_image(path: &Path) -> DataResult<ImageTensor> {
    if !path.exists() {
        return Err(DataError::FileNotFound(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DataError::Decode { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    Ok(ImageTensor::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw()))
}

/// Uniformly sampled `size x size` crop; deterministic for a fixed rng.
pub fn sample_patch(img: &ImageTensor, size: usize, rng: &mut ChaCha8Rng) -> DataResult<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    if size > h || size > w {
        return Err(DataError::PatchTooLarge { size, h, w });
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    Ok(ImageTensor::new(img.data.slice(s![.., y..y + size, x..x + size]).to_owned()))
}

/// Draws a quality factor uniformly from 10..=95 and compresses.
pub fn make_pair(original: &ImageTensor, rng: &mut ChaCha8Rng) -> DataResult<ImagePair> {
    let qf: u8 = rng.random_range(10..=95);
    let compressed = jpeg_roundtrip(original, qf as i64)?;
    Ok(ImagePair { compressed, original: original.clone(), qf: QfLabel::Quality(qf) })
}

/// Sorted list of decodable image paths (by extension) in a directory.
pub fn list_images(dir: &Path) -> DataResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| DataError::Io { path: dir.into(), source: e })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::EmptyDataset(dir.into()));
    }
    Ok(files)
}

/// How a stream turns a source image into the network-sized original.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Random crop of this size (compression happens after cropping).
    Patch(usize),
    /// Bilinear resize to this square size.
    Resize(usize),
}

/// Streams shuffled batches of compressed/original pairs from an image
/// folder. Epoch order, patch offsets, and quality draws all derive from
/// the seed, so two streams with the same seed yield identical batches.
/// Incomplete trailing batches are dropped.
#[derive(Debug)]
pub struct PairStream {
    files: Vec<PathBuf>,
    batch_size: usize,
    mode: SampleMode,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

impl PairStream {
    pub fn open(
        dir: &Path,
        batch_size: usize,
        mode: SampleMode,
        seed: u64,
    ) -> DataResult<PairStream> {
        assert!(batch_size >= 1);
        let files = list_images(dir)?;
        let mut s = PairStream {
            files,
            batch_size,
            mode,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.files.len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, self.epoch, 0xE0C4));
        self.order = (0..self.files.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Next full batch, rolling over epochs as needed.
    pub fn next_batch(&mut self) -> DataResult<Vec<ImagePair>> {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let picked: Vec<(usize, usize)> = (0..self.batch_size)
            .map(|k| (self.cursor + k, self.order[self.cursor + k]))
            .collect();
        self.cursor += self.batch_size;
        let (seed, epoch, mode) = (self.seed, self.epoch, self.mode);
        // Read-only parallel loading; per-item rngs are derived from the
        // (seed, epoch, slot) triple so ordering stays deterministic.
        let pairs: Vec<DataResult<ImagePair>> = picked
            .par_iter()
            .map(|&(slot, file_idx)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, slot as u64));
                let img = load_image(&self.files[file_idx])?;
                let original = match mode {
                    SampleMode::Patch(size) => sample_patch(&img, size, &mut rng)?,
                    SampleMode::Resize(size) => img.resize(size),
                };
                make_pair(&original, &mut rng)
            })
            .collect();
        pairs.into_iter().collect()
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = seed ^ a.rotate_left(17) ^ b.rotate_left(41);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
