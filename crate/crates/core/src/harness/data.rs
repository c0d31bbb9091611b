//! CIFAR-10 in its published binary layout: records of one label byte
//! followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue, row-major).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LappError, Result};
use crate::Scalar;

pub const EXTENT: usize = 32;
pub const CHANNELS: usize = 3;
pub const CLASSES: usize = 10;
const IMAGE_BYTES: usize = CHANNELS * EXTENT * EXTENT;
const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const PAD: usize = 4;

pub const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Images kept as raw bytes; conversion happens per batch.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as `3 × 32 × 32` values in `[0, 1]`.
    pub fn image(&self, i: usize) -> Array3<f32> {
        let raw = &self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES];
        Array3::from_shape_fn((CHANNELS, EXTENT, EXTENT), |(c, y, x)| raw[(c * EXTENT + y) * EXTENT + x] as f32 / 255.0)
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * IMAGE_BYTES);
        }
    }

    pub fn push(&mut self, label: u8, image: &[u8]) {
        assert_eq!(image.len(), IMAGE_BYTES);
        self.labels.push(label);
        self.pixels.extend_from_slice(image);
    }

    /// Standardized batch for `indices`; augmented when `rng` is given.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        norm: &Normalization,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> (Array4<T>, Vec<usize>) {
        let mut x = Array4::zeros((indices.len(), CHANNELS, EXTENT, EXTENT));
        for (slot, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let img = match rng.as_deref_mut() {
                Some(r) => augment_train(&img, norm, r),
                None => norm.standardize(&img),
            };
            x.index_axis_mut(Axis(0), slot).assign(&img.mapv(|v| T::lit(v as f64)));
        }
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn label_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// Writes the split in the published binary layout.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(&self.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn read_batch_file(path: &Path, into: &mut Dataset) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| LappError::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(LappError::Ingestion {
            path: path.to_path_buf(),
            reason: format!("size {} is not a positive multiple of the {RECORD_BYTES}-byte record", bytes.len()),
        });
    }
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        if rec[0] as usize >= CLASSES {
            return Err(LappError::Ingestion {
                path: path.to_path_buf(),
                reason: format!("label byte {} out of range", rec[0]),
            });
        }
        into.push(rec[0], &rec[1..]);
    }
    Ok(())
}

/// Locates the batch files either directly in `data_dir` or in its
/// `cifar-10-batches-bin` subdirectory.
fn batch_dir(data_dir: &Path) -> PathBuf {
    let nested = data_dir.join("cifar-10-batches-bin");
    if nested.join(TEST_FILE).exists() {
        nested
    } else {
        data_dir.to_path_buf()
    }
}

/// Train and test splits.
pub fn load_cifar10(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = batch_dir(data_dir);
    let mut train = Dataset::default();
    for f in TRAIN_FILES {
        read_batch_file(&dir.join(f), &mut train)?;
    }
    let mut test = Dataset::default();
    read_batch_file(&dir.join(TEST_FILE), &mut test)?;
    Ok((train, test))
}

/// Learnable stand-in for CIFAR-10: each class has a smooth random
/// prototype, and every image is its prototype plus pixel noise, shifted by
/// a few pixels. Labels cycle through the classes.
pub fn synthetic_cifar(n: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let plane = EXTENT * EXTENT;
    let prototypes: Vec<Vec<f32>> = (0..CLASSES)
        .map(|_| {
            let coarse: Vec<f32> = (0..CHANNELS * 16).map(|_| rng.random_range(0.1..0.9)).collect();
            (0..IMAGE_BYTES)
                .map(|i| {
                    let (c, y, x) = (i / plane, (i % plane) / EXTENT, i % EXTENT);
                    coarse[c * 16 + (y / 8) * 4 + x / 8]
                })
                .collect()
        })
        .collect();
    let mut d = Dataset::default();
    let mut img = vec![0u8; IMAGE_BYTES];
    for i in 0..n {
        let label = i % CLASSES;
        let (dy, dx) = (rng.random_range(0..4usize), rng.random_range(0..4usize));
        for (j, px) in img.iter_mut().enumerate() {
            let (c, y, x) = (j / plane, (j % plane) / EXTENT, j % EXTENT);
            let src = (c * EXTENT + (y + dy) % EXTENT) * EXTENT + (x + dx) % EXTENT;
            let v = prototypes[label][src] + rng.random_range(-0.25f32..0.25);
            *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        d.push(label as u8, &img);
    }
    d
}

/// Writes `train` across the five training batch files and `test` to the
/// test batch file, in the published layout.
pub fn write_cifar_layout(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let per = train.len().div_ceil(TRAIN_FILES.len()).max(1);
    for (b, f) in TRAIN_FILES.iter().enumerate() {
        let mut part = Dataset::default();
        for i in (b * per)..((b + 1) * per).min(train.len()) {
            part.push(train.labels[i], &train.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
        }
        if part.is_empty() {
            return Err(LappError::Usage(format!("need at least {} training images", TRAIN_FILES.len())));
        }
        part.write_binary(&dir.join(f))?;
    }
    test.write_binary(&dir.join(TEST_FILE))
}

/// Per-channel mean and standard deviation on the `[0, 1]` scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Population statistics of a split.
    pub fn from_dataset(data: &Dataset) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let plane = EXTENT * EXTENT;
        for img in data.pixels.chunks_exact(IMAGE_BYTES) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (data.len() * plane).max(1) as f64;
        let mut mean = [0f32; 3];
        let mut std = [1f32; 3];
        for c in 0..CHANNELS {
            let m = sum[c] / count;
            mean[c] = m as f32;
            std[c] = ((sq[c] / count - m * m).max(0.0).sqrt().max(1e-6)) as f32;
        }
        Normalization { mean, std }
    }

    pub fn standardize(&self, img: &Array3<f32>) -> Array3<f32> {
        let mut out = img.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// Zero-pads by [`PAD`] and crops the window at `(top, left)` of the padded image.
pub fn pad_crop(img: &Array3<f32>, top: usize, left: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let (py, px) = (y + top, x + left);
        if py < PAD || px < PAD || py >= h + PAD || px >= w + PAD {
            0.0
        } else {
            img[[ch, py - PAD, px - PAD]]
        }
    })
}

pub fn hflip(img: &Array3<f32>) -> Array3<f32> {
    let (_, _, w) = img.dim();
    Array3::from_shape_fn(img.dim(), |(c, y, x)| img[[c, y, w - 1 - x]])
}

/// Random crop of the zero-padded image, horizontal flip with probability
/// 0.5, then per-channel standardization.
pub fn augment_train<R: Rng + ?Sized>(img: &Array3<f32>, norm: &Normalization, rng: &mut R) -> Array3<f32> {
    let top = rng.random_range(0..=2 * PAD);
    let left = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    let mut out = pad_crop(img, top, left);
    if flip {
        out = hflip(&out);
    }
    norm.standardize(&out)
}
