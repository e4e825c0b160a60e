//! Datasets: CIFAR-10 binary batches, a seeded synthetic generator, and
//! class-per-subdirectory image folders.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD: usize = 3073;
const CIFAR10_SIDE: usize = 32;
const CIFAR10_CLASSES: usize = 10;

/// Per-channel CIFAR-10 training-set statistics of pixels scaled to [0, 1].
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// In-memory labeled images, `[n, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} ≥ {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let w = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * w..(i + 1) * w]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }

    /// The first `n` samples (all when `n ≥ len`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self { images, labels, num_classes: self.num_classes }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Per-channel mean and population std over every pixel.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let s = self.image_shape();
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in self.images.data().chunks(c * hw) {
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * hw) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt() as f32).collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// `(x − mean[c]) / std[c]` per channel.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        let s = self.image_shape().to_vec();
        if norm.mean.len() != s[0] || norm.std.len() != s[0] {
            return Err(Error::Config(format!(
                "normalization has {} channels, images have {}",
                norm.mean.len(),
                s[0]
            )));
        }
        let hw = s[1] * s[2];
        for img in self.images.data_mut().chunks_mut(s[0] * hw) {
            for ch in 0..s[0] {
                for v in &mut img[ch * hw..(ch + 1) * hw] {
                    *v = (*v - norm.mean[ch]) / norm.std[ch];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self {
            mean: CIFAR10_MEAN.to_vec(),
            std: CIFAR10_STD.to_vec(),
        }
    }
}

/// Parses concatenated CIFAR-10 records into pixels scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % CIFAR10_RECORD) as u64,
            msg: format!("{} bytes is not a positive multiple of {CIFAR10_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR10_RECORD).enumerate() {
        let y = rec[0] as usize;
        if y >= CIFAR10_CLASSES {
            return Err(Error::Data(format!("record {i}: label {y} ≥ {CIFAR10_CLASSES}")));
        }
        labels.push(y);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::from_parts(vec![n, 3, CIFAR10_SIDE, CIFAR10_SIDE], pixels);
    Dataset::new(images, labels, CIFAR10_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Loads a CIFAR-10 binary file, or the standard batch files of `split` when
/// `path` is a directory. Pixels are scaled to [0, 1], then normalized if
/// `norm` is given.
pub fn load_cifar10(path: &Path, split: Split, norm: Option<&Normalization>) -> Result<Dataset> {
    let files: Vec<PathBuf> = if path.is_dir() {
        match split {
            Split::Train => (1..=5).map(|i| path.join(format!("data_batch_{i}.bin"))).collect(),
            Split::Test => vec![path.join("test_batch.bin")],
        }
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = std::fs::read(f)?;
        if chunk.len() % CIFAR10_RECORD != 0 {
            return Err(Error::Format {
                offset: (chunk.len() - chunk.len() % CIFAR10_RECORD) as u64,
                msg: format!("{}: size {} not a multiple of {CIFAR10_RECORD}", f.display(), chunk.len()),
            });
        }
        bytes.extend(chunk);
    }
    let mut ds = parse_cifar10(&bytes)?;
    if let Some(n) = norm {
        ds.normalize(n)?;
    }
    Ok(ds)
}

/// Seeded, balanced, class-separable images.
///
/// Class `c` is an oriented sinusoidal grating: orientation from `c mod 5`,
/// spatial frequency from `c / 5`, with a faint class-specific color mix.
/// Each sample jitters orientation and frequency, draws a random phase,
/// contrast and color cast, overlays a random distractor grating, and adds
/// Gaussian pixel noise. Sample `i` has label `i mod num_classes`.
pub fn synthetic_dataset(seed: u64, n: usize, num_classes: usize, image_size: usize) -> Result<Dataset> {
    use std::f64::consts::PI;
    if n == 0 || num_classes == 0 || image_size == 0 {
        return Err(Error::Config("synthetic dataset needs positive n, classes and size".into()));
    }
    const NOISE: f64 = 1.0;
    const ANGLE_JITTER: f64 = 0.22;
    const FREQ_JITTER: f64 = 0.35;
    const DISTRACTOR: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        let angle = PI * (c % 5) as f64 / 5.0 + rng.random_range(-ANGLE_JITTER..ANGLE_JITTER);
        let freq = 1.0 + (c / 5) as f64 * 1.5 + rng.random_range(-FREQ_JITTER..FREQ_JITTER);
        let hue = 2.0 * PI * c as f64 / num_classes as f64;
        let cast: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let color: [f64; 3] = std::array::from_fn(|k| 1.0 + 0.2 * (hue + 2.1 * k as f64).cos() + cast[k]);
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.5..1.2);
        let (ca, sa) = (angle.cos(), angle.sin());
        let d_angle = rng.random_range(0.0..PI);
        let d_freq = rng.random_range(0.5..4.0);
        let d_phase = rng.random_range(0.0..2.0 * PI);
        let (da, ds) = (d_angle.cos(), d_angle.sin());
        for &tint in &color {
            for y in 0..s {
                for x in 0..s {
                    let (xf, yf) = (x as f64 / s as f64, y as f64 / s as f64);
                    let wave = (2.0 * PI * freq * (xf * ca + yf * sa) + phase).sin();
                    let distractor = (2.0 * PI * d_freq * (xf * da + yf * ds) + d_phase).sin();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    data.push((contrast * tint * wave + DISTRACTOR * distractor + NOISE * noise) as f32);
                }
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::from_parts(vec![n, 3, s, s], data), labels, num_classes)
}

/// Loads `dir/<class>/<image>` files; classes are subdirectory names in
/// sorted order. Images are converted to RGB and resized to `image_size`.
pub fn load_image_directory(dir: &Path, image_size: usize, norm: Option<&Normalization>) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class subdirectories", dir.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(class_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?
                .resize_exact(
                    image_size as u32,
                    image_size as u32,
                    image::imageops::FilterType::Triangle,
                )
                .to_rgb8();
            for ch in 0..3 {
                for px in img.pixels() {
                    data.push(px.0[ch] as f32 / 255.0);
                }
            }
            labels.push(label);
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no images", dir.display())));
    }
    let mut ds = Dataset::new(
        Tensor::from_parts(vec![n, 3, image_size, image_size], data),
        labels,
        classes.len(),
    )?;
    if let Some(nm) = norm {
        ds.normalize(nm)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10Binary,
    Synthetic,
    ImageDirectory,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" | "cifar10-binary" => Ok(Self::Cifar10Binary),
            "synthetic" => Ok(Self::Synthetic),
            "image-directory" | "images" => Ok(Self::ImageDirectory),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cifar10Binary => "cifar10",
            Self::Synthetic => "synthetic",
            Self::ImageDirectory => "image-directory",
        })
    }
}

/// Where samples come from and how they are prepared.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub location: Option<PathBuf>,
    pub split: Split,
    pub normalization: Option<Normalization>,
    pub seed: u64,
    /// Sample count for synthetic data; an upper bound for the others.
    pub samples: Option<usize>,
    pub num_classes: usize,
    pub image_size: usize,
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        let need_path = || {
            self.location
                .as_deref()
                .ok_or_else(|| Error::Config(format!("dataset '{}' needs a path", self.kind)))
        };
        let ds = match self.kind {
            DatasetKind::Synthetic => {
                // disjoint streams for the two splits
                let seed = match self.split {
                    Split::Train => self.seed,
                    Split::Test => self.seed ^ 0x5eed_7e57,
                };
                synthetic_dataset(seed, self.samples.unwrap_or(1000), self.num_classes, self.image_size)?
            }
            DatasetKind::Cifar10Binary => {
                let ds = load_cifar10(need_path()?, self.split, self.normalization.as_ref())?;
                if self.image_size != CIFAR10_SIDE {
                    return Err(Error::Config(format!(
                        "CIFAR-10 images are {CIFAR10_SIDE}px, config asks for {}",
                        self.image_size
                    )));
                }
                ds
            }
            DatasetKind::ImageDirectory => {
                load_image_directory(need_path()?, self.image_size, self.normalization.as_ref())?
            }
        };
        Ok(match self.samples {
            Some(n) if self.kind != DatasetKind::Synthetic => ds.take(n),
            _ => ds,
        })
    }
}

/// Deterministic permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Mirrors `[B, C, H, W]` images left-right in place where `mask[b]` is set.
pub fn hflip_batch(images: &mut Tensor<f32>, mask: &[bool]) {
    let s = images.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    for (b, img) in images.data_mut().chunks_mut(c * h * w).enumerate() {
        if mask[b] {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR10_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn single_record() {
        let ds = parse_cifar10(&record(7, 255)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![7]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn malformed_sizes_and_labels() {
        let mut bytes = record(1, 0);
        bytes.pop();
        assert!(matches!(parse_cifar10(&bytes), Err(Error::Format { .. })));
        assert!(matches!(parse_cifar10(&[]), Err(Error::Format { .. })));
        assert!(matches!(parse_cifar10(&record(10, 0)), Err(Error::Data(_))));
    }

    #[test]
    fn channel_major_layout() {
        let mut r = record(0, 0);
        // red plane first pixel, green plane last pixel
        r[1] = 255;
        r[1 + 1024 + 1023] = 51;
        let ds = parse_cifar10(&r).unwrap();
        assert_eq!(ds.images.data()[0], 1.0);
        assert_eq!(ds.images.data()[1024 + 1023], 0.2);
    }

    #[test]
    fn normalization_applies_per_channel() {
        let mut ds = parse_cifar10(&record(3, 255)).unwrap();
        ds.normalize(&Normalization::cifar10()).unwrap();
        let v = ds.images.data()[2048];
        assert!((v - (1.0 - CIFAR10_MEAN[2]) / CIFAR10_STD[2]).abs() < 1e-6);
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = synthetic_dataset(42, 100, 10, 8).unwrap();
        let b = synthetic_dataset(42, 100, 10, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_histogram(), vec![10; 10]);
        let c = synthetic_dataset(43, 100, 10, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_splits_differ() {
        let src = |split| DatasetSource {
            kind: DatasetKind::Synthetic,
            location: None,
            split,
            normalization: None,
            seed: 1,
            samples: Some(20),
            num_classes: 4,
            image_size: 8,
        };
        assert_ne!(src(Split::Train).load().unwrap().images, src(Split::Test).load().unwrap().images);
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = synthetic_dataset(0, 6, 3, 4).unwrap();
        let (x, y) = ds.batch(&[4, 1]);
        assert_eq!(x.shape(), &[2, 3, 4, 4]);
        assert_eq!(y, vec![1, 1]);
        assert_eq!(x.row(0).unwrap(), ds.images.row(4).unwrap());
    }

    #[test]
    fn hflip_mirrors_rows() {
        let mut t = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f32);
        hflip_batch(&mut t, &[true]);
        assert_eq!(t.data(), &[2., 1., 0., 5., 4., 3.]);
    }
}
