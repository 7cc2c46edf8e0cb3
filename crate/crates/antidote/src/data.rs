//! Dataset ingestion: CIFAR-10 binary records, a deterministic synthetic
//! shapes generator for desk-scale experiments, and the flip/pad/crop
//! augmentation pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;

/// Per-channel standardization constants applied after the 0..1 scaling.
#[derive(Debug, Clone)]
pub struct NormalizeSpec {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormalizeSpec {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Conventional CIFAR-10 statistics.
    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dims();
        (c, h, w)
    }

    /// Copy the samples at `indices` into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let (_, c, h, w) = self.images.dims();
        let chw = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * chw);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor4::from_vec((indices.len(), c, h, w), data)?, labels))
    }
}

/// Parse CIFAR-10 binary files (1 label byte + 3072 CHW pixel bytes per
/// record). Pixels scale to 0..1 and standardize per channel; at most
/// `max_per_class` records of each class are kept.
pub fn load_cifar10_binary(
    path: &Path,
    max_per_class: usize,
    normalize: &NormalizeSpec,
) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.display().to_string() });
    }
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut found: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io("read dataset dir", e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Error::MissingArtifact {
                path: format!("{} (no .bin files)", path.display()),
            });
        }
        found
    } else {
        vec![path.to_path_buf()]
    };
    if normalize.mean.len() != 3 || normalize.std.len() != 3 {
        return Err(Error::Config { reason: "CIFAR normalization needs 3 channels".into() });
    }

    let mut per_class = [0usize; CIFAR_CLASSES];
    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io("read dataset file", e))?;
        if bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::DataFormat {
                reason: format!(
                    "{}: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
                    file.display(),
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            let label = record[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::DataFormat {
                    reason: format!("label byte {label} out of range"),
                });
            }
            if max_per_class > 0 && per_class[label] >= max_per_class {
                continue;
            }
            per_class[label] += 1;
            labels.push(label);
            for (ch, plane) in record[1..].chunks_exact(1024).enumerate() {
                let mean = normalize.mean[ch];
                let std = normalize.std[ch];
                data.extend(plane.iter().map(|&b| ((b as f32 / 255.0) - mean) / std));
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::DataFormat { reason: "no records".into() });
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor4::from_vec((n, 3, 32, 32), data)?,
        labels,
        class_count: CIFAR_CLASSES,
        split: "cifar10".into(),
    })
}

pub const SYNTH_SIDE: usize = 28;
/// Standardization applied to the synthetic images.
pub const SYNTH_MEAN: f32 = 0.25;
pub const SYNTH_STD: f32 = 0.3;
/// Uniform pixel noise amplitude before standardization.
const SYNTH_NOISE: f32 = 0.22;

/// Deterministic 28x28 grayscale dataset of 10 parameterized geometric
/// pattern classes (stripes, disk, ring, squares, crosses, checkerboard)
/// with position/size jitter and additive noise. Labels cycle through the
/// classes, so any n divisible by `classes` is exactly balanced.
pub fn synth_shapes(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > 10 {
        return Err(Error::Config { reason: format!("classes must be 1..=10, got {classes}") });
    }
    if n == 0 {
        return Err(Error::Config { reason: "n must be >= 1".into() });
    }
    let side = SYNTH_SIDE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let mut rng = Rng::substream(seed, i as u64);
        let img = draw_shape(label, side, &mut rng);
        data.extend(img.iter().map(|v| (v - SYNTH_MEAN) / SYNTH_STD));
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor4::from_vec((n, 1, side, side), data)?,
        labels,
        class_count: classes,
        split: "synthetic".into(),
    })
}

fn draw_shape(class: usize, side: usize, rng: &mut Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; side * side];
    let amp = 0.65 + 0.35 * rng.next_f32();
    let jx = rng.next_below(7) as isize - 3;
    let jy = rng.next_below(7) as isize - 3;
    let cx = side as isize / 2 + jx;
    let cy = side as isize / 2 + jy;
    let phase = rng.next_below(4) as isize;
    let period = 4 + rng.next_below(2) as isize; // 4 or 5
    let radius = 6 + rng.next_below(4) as isize; // 6..=9

    let set = |img: &mut Vec<f32>, x: isize, y: isize, v: f32| {
        if x >= 0 && y >= 0 && (x as usize) < side && (y as usize) < side {
            img[y as usize * side + x as usize] = v;
        }
    };

    for y in 0..side as isize {
        for x in 0..side as isize {
            let dx = x - cx;
            let dy = y - cy;
            let on = match class {
                // stripes
                0 => (y + phase).rem_euclid(period) < period / 2,
                1 => (x + phase).rem_euclid(period) < period / 2,
                2 => (x + y + phase).rem_euclid(period) < period / 2,
                // disk / ring
                3 => dx * dx + dy * dy <= radius * radius,
                4 => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= radius * radius && d2 >= (radius - 3) * (radius - 3)
                }
                // filled square / frame
                5 => dx.abs() < radius && dy.abs() < radius,
                6 => {
                    let a = dx.abs().max(dy.abs());
                    a < radius && a >= radius - 3
                }
                // plus / X
                7 => (dx.abs() <= 2 || dy.abs() <= 2) && dx.abs().max(dy.abs()) <= radius,
                8 => {
                    ((dx - dy).abs() <= 2 || (dx + dy).abs() <= 2)
                        && dx.abs().max(dy.abs()) <= radius
                }
                // checkerboard
                _ => ((x / 3 + y / 3) + phase).rem_euclid(2) == 0,
            };
            if on {
                set(&mut img, x, y, amp);
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + SYNTH_NOISE * rng.next_f32()).clamp(0.0, 1.0);
    }
    img
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub hflip_prob: f32,
    pub crop_padding: usize,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip_prob: 0.5, crop_padding: 4, enabled: true }
    }
}

/// Random horizontal flip, then zero-pad by `crop_padding` on every side and
/// crop back to the original size at a uniformly random offset. Each image
/// draws from its own split generator. Dims and labels are untouched.
pub fn augment(batch: &Tensor4, config: &AugmentConfig, rng: &mut Rng) -> Result<Tensor4> {
    if !config.enabled {
        return Ok(batch.clone());
    }
    let (n, c, h, w) = batch.dims();
    let pad = config.crop_padding as isize;
    let mut out = Tensor4::zeros((n, c, h, w))?;
    for s in 0..n {
        let mut r = rng.split();
        let flip = r.next_f32() < config.hflip_prob;
        let dy = r.next_below(2 * config.crop_padding + 1) as isize;
        let dx = r.next_below(2 * config.crop_padding + 1) as isize;
        for ch in 0..c {
            let src = batch.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let sy = y + dy - pad;
                    let sx = x + dx - pad;
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue; // zero padding
                    }
                    let sx = if flip { w as isize - 1 - sx } else { sx };
                    dst[y as usize * w + x as usize] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Flip every image horizontally (the deterministic half of `augment`,
/// exposed for tests of the involution property).
pub fn hflip(batch: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = batch.dims();
    let mut out = batch.clone();
    for s in 0..n {
        for ch in 0..c {
            let plane = out.plane_mut(s, ch);
            for y in 0..h {
                plane[y * w..(y + 1) * w].reverse();
            }
        }
    }
    out
}

impl Dataset {
    /// Cache the dataset as a tensor record plus a little-endian label file.
    pub fn save_cache(&self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        self.images.write_to(&mut blob).map_err(|e| Error::io("dataset cache", e))?;
        crate::fsio::atomic_write(&stem.with_extension("tensor"), &blob)?;
        let mut labels = Vec::with_capacity(4 + self.labels.len() * 4);
        labels.extend((self.labels.len() as u32).to_le_bytes());
        labels.extend((self.class_count as u32).to_le_bytes());
        for &l in &self.labels {
            labels.extend((l as u32).to_le_bytes());
        }
        crate::fsio::atomic_write(&stem.with_extension("labels"), &labels)?;
        Ok(())
    }

    pub fn load_cache(stem: &Path, split: &str) -> Result<Dataset> {
        let tensor_path = stem.with_extension("tensor");
        if !tensor_path.exists() {
            return Err(Error::MissingArtifact { path: tensor_path.display().to_string() });
        }
        let blob = fs::read(&tensor_path).map_err(|e| Error::io("dataset cache", e))?;
        let images = Tensor4::read_from(&mut blob.as_slice())?;
        let lbytes = fs::read(stem.with_extension("labels"))
            .map_err(|e| Error::io("dataset labels", e))?;
        if lbytes.len() < 8 {
            return Err(Error::DataFormat { reason: "label cache truncated".into() });
        }
        let count = u32::from_le_bytes(lbytes[0..4].try_into().unwrap()) as usize;
        let class_count = u32::from_le_bytes(lbytes[4..8].try_into().unwrap()) as usize;
        if lbytes.len() != 8 + count * 4 {
            return Err(Error::DataFormat { reason: "label cache length mismatch".into() });
        }
        let labels: Vec<usize> = lbytes[8..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        Ok(Dataset { images, labels, class_count, split: split.into() })
    }
}
