//! Image datasets: the DSB1 container, a synthetic grating generator, a
//! CIFAR-10 converter, and the normalized batch pipeline.
//!
//! DSB1 layout (little-endian): magic `DSB1`, then u32 `num_classes`,
//! `channels`, `height`, `width`, `n_train`, `n_test`, followed by the
//! train pixels (u8), train labels (u16), test pixels and test labels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"DSB1";
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a DSB1 dataset (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("dataset truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dataset has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("{split} sample {index} has label {label}, but there are only {classes} classes")]
    LabelOutOfRange {
        split: &'static str,
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Images and labels of one split. Pixels are `[N, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }
}

/// A validated train/test pair with per-channel normalization statistics
/// computed from the train split.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: Split,
    pub test: Split,
    /// Per-channel mean of `x / 255` over the train split.
    pub mean: Vec<f64>,
    /// Per-channel standard deviation of `x / 255` over the train split.
    pub std: Vec<f64>,
}

impl PartialEq for DatasetBundle {
    fn eq(&self, other: &Self) -> bool {
        (self.num_classes, self.channels, self.height, self.width) == (other.num_classes, other.channels, other.height, other.width)
            && self.train == other.train
            && self.test == other.test
    }
}

impl DatasetBundle {
    pub fn new(
        num_classes: usize,
        [channels, height, width]: [usize; 3],
        train: Split,
        test: Split,
    ) -> Result<Self, DataError> {
        if num_classes < 2 || num_classes > u16::MAX as usize + 1 {
            return Err(DataError::Invalid(format!("class count {num_classes} out of range")));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::Invalid(format!("image shape {channels}x{height}x{width} has a zero extent")));
        }
        let pixels = channels * height * width;
        for (split, kind) in [(&train, SplitKind::Train), (&test, SplitKind::Test)] {
            if split.is_empty() {
                return Err(DataError::EmptySplit(kind.name()));
            }
            if split.images.len() != split.len() * pixels {
                return Err(DataError::Invalid(format!(
                    "{} split has {} pixels for {} images of {pixels}",
                    kind.name(),
                    split.images.len(),
                    split.len()
                )));
            }
            if let Some((index, &label)) = split.labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
                return Err(DataError::LabelOutOfRange {
                    split: kind.name(),
                    index,
                    label,
                    classes: num_classes,
                });
            }
        }
        let (mean, std) = channel_stats(&train.images, channels, height * width);
        Ok(DatasetBundle {
            num_classes,
            channels,
            height,
            width,
            train,
            test,
            mean,
            std,
        })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.train.images.len() * 2 + self.test.images.len() * 2);
        out.extend_from_slice(MAGIC);
        for v in [
            self.num_classes,
            self.channels,
            self.height,
            self.width,
            self.train.len(),
            self.test.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for split in [&self.train, &self.test] {
            out.extend_from_slice(&split.images);
            for &l in &split.labels {
                out.extend_from_slice(&(l as u16).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN {
            return Err(DataError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
        if &magic != MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4-byte slice")) as usize;
        let (classes, c, h, w, n_tr, n_te) = (word(0), word(1), word(2), word(3), word(4), word(5));
        let pixels = c
            .checked_mul(h)
            .and_then(|p| p.checked_mul(w))
            .ok_or_else(|| DataError::Invalid("image extents overflow".into()))?;
        let split_len = |n: usize| n.checked_mul(pixels + 2);
        let expected = split_len(n_tr)
            .zip(split_len(n_te))
            .and_then(|(a, b)| a.checked_add(b)?.checked_add(HEADER_LEN))
            .ok_or_else(|| DataError::Invalid("sample counts overflow".into()))?;
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes(bytes.len() - expected));
        }
        let mut pos = HEADER_LEN;
        let mut read_split = |n: usize| {
            let images = bytes[pos..pos + n * pixels].to_vec();
            pos += n * pixels;
            let labels = bytes[pos..pos + 2 * n]
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
                .collect();
            pos += 2 * n;
            Split { images, labels }
        };
        let train = read_split(n_tr);
        let test = read_split(n_te);
        DatasetBundle::new(classes, [c, h, w], train, test)
    }

    /// Mini-batches of normalized images `(x / 255 − mean) / std`.
    ///
    /// With `shuffle = Some((seed, epoch))` the sample order is a seeded
    /// Fisher–Yates permutation that depends on both values; `None` keeps
    /// file order. The last batch may be short.
    pub fn batches<T: Element>(&self, kind: SplitKind, batch_size: usize, shuffle: Option<(u64, u64)>) -> Batches<'_, T> {
        assert!(batch_size >= 1, "batch size must be at least 1");
        let split = self.split(kind);
        let order = match shuffle {
            Some((seed, epoch)) => shuffled_indices(split.len(), seed, epoch),
            None => (0..split.len()).collect(),
        };
        let plane = self.height * self.width;
        let scale: Vec<(f64, f64)> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| (1.0 / (255.0 * s), m / s))
            .collect();
        Batches {
            bundle: self,
            split,
            order,
            pos: 0,
            batch_size,
            plane,
            scale,
            _marker: std::marker::PhantomData,
        }
    }
}

fn channel_stats(images: &[u8], channels: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for (i, chunk) in images.chunks(plane).enumerate() {
        let c = i % channels;
        for &v in chunk {
            let x = v as f64 / 255.0;
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    let n = (images.len() / channels.max(1)).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n - m * m).max(0.0);
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Seeded Fisher–Yates permutation of `0..n`, one stream per epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One normalized mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    /// Positions of these samples within their split.
    pub indices: Vec<usize>,
}

pub struct Batches<'a, T: Element> {
    bundle: &'a DatasetBundle,
    split: &'a Split,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    plane: usize,
    scale: Vec<(f64, f64)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Batches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Skips the first `n` batches without materializing them.
    pub fn skip_batches(&mut self, n: usize) {
        self.pos = (self.pos + n * self.batch_size).min(self.order.len());
    }
}

impl<T: Element> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let b = self.bundle;
        let sample = b.channels * self.plane;
        let mut data = Vec::with_capacity(indices.len() * sample);
        for &i in &indices {
            let img = &self.split.images[i * sample..(i + 1) * sample];
            for (c, plane) in img.chunks(self.plane).enumerate() {
                let (mul, sub) = self.scale[c];
                data.extend(plane.iter().map(|&v| T::from_f64(v as f64 * mul - sub)));
            }
        }
        let labels = indices.iter().map(|&i| self.split.labels[i]).collect();
        let images = Tensor::new(data, &[indices.len(), b.channels, b.height, b.width]).expect("batch extents are consistent");
        Some(Batch { images, labels, indices })
    }
}

pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<(), DataError> {
    fs::write(path, bundle.to_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    DatasetBundle::from_bytes(&bytes)
}

/// Parameters of the synthetic grating dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise: f64,
    /// Standard deviation of the per-sample grating phase shift, in radians.
    pub phase_jitter: f64,
}

impl SynthParams {
    pub fn new(classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthParams {
            classes,
            train_per_class: per_class,
            test_per_class: (per_class / 2).max(1),
            height,
            width,
            seed,
            noise: 140.0,
            phase_jitter: 0.4,
        }
    }
}

/// Single-channel class-conditional gratings. Class `k` has its own
/// orientation, spatial frequency and phase; every sample jitters all
/// three, its contrast and brightness, and adds Gaussian pixel noise.
pub fn synth_dataset(classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> Result<DatasetBundle, DataError> {
    synth_with(&SynthParams::new(classes, per_class, height, width, seed))
}

pub fn synth_with(p: &SynthParams) -> Result<DatasetBundle, DataError> {
    if p.classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {}", p.classes)));
    }
    if p.train_per_class == 0 || p.test_per_class == 0 {
        return Err(DataError::Invalid("per-class sample counts must be positive".into()));
    }
    if !(p.noise >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be non-negative, got {}", p.noise)));
    }
    if !(p.phase_jitter >= 0.0) {
        return Err(DataError::Invalid(format!("phase jitter must be non-negative, got {}", p.phase_jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let pixel_noise = Normal::new(0.0, p.noise).expect("finite non-negative std");
    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = std::f64::consts::TAU;
    let class_params: Vec<(f64, f64, f64)> = (0..p.classes)
        .map(|k| {
            let theta = std::f64::consts::PI * k as f64 / p.classes as f64;
            let cycles = 2.0 + 1.5 * (k % 3) as f64;
            let phase = tau * k as f64 / p.classes as f64;
            (theta, cycles, phase)
        })
        .collect();
    let extent = p.height.max(p.width) as f64;
    let mut make_split = |per_class: usize| {
        let n = per_class * p.classes;
        let mut images = Vec::with_capacity(n * p.height * p.width);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % p.classes;
            let (theta, cycles, phase) = class_params[k];
            let theta = theta + 0.12 * jitter.sample(&mut rng);
            let freq = tau * cycles * (1.0 + 0.08 * jitter.sample(&mut rng)) / extent;
            let phase = phase + p.phase_jitter * jitter.sample(&mut rng);
            let contrast = rng.gen_range(35.0..70.0);
            let brightness = 128.0 + rng.gen_range(-20.0..20.0);
            let (s, c) = theta.sin_cos();
            for y in 0..p.height {
                for x in 0..p.width {
                    let u = c * x as f64 + s * y as f64;
                    let v = brightness + contrast * (freq * u + phase).sin() + pixel_noise.sample(&mut rng);
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(k);
        }
        Split { images, labels }
    };
    let train = make_split(p.train_per_class);
    let test = make_split(p.test_per_class);
    DatasetBundle::new(p.classes, [1, p.height, p.width], train, test)
}

/// Test accuracy (%) of a nearest-class-centroid classifier fit on the
/// train split, in raw pixel space.
pub fn nearest_centroid_accuracy(bundle: &DatasetBundle) -> f64 {
    let d = bundle.channels * bundle.height * bundle.width;
    let mut centroids = vec![0.0f64; bundle.num_classes * d];
    let mut counts = vec![0usize; bundle.num_classes];
    for (img, &l) in bundle.train.images.chunks(d).zip(&bundle.train.labels) {
        counts[l] += 1;
        for (c, &v) in centroids[l * d..(l + 1) * d].iter_mut().zip(img) {
            *c += v as f64;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        centroids[k * d..(k + 1) * d].iter_mut().for_each(|c| *c /= n.max(1) as f64);
    }
    let correct = bundle
        .test
        .images
        .chunks(d)
        .zip(&bundle.test.labels)
        .filter(|(img, &l)| {
            let dist = |k: usize| -> f64 {
                centroids[k * d..(k + 1) * d]
                    .iter()
                    .zip(img.iter())
                    .map(|(c, &v)| (c - v as f64).powi(2))
                    .sum()
            };
            let best = (0..bundle.num_classes).fold(0, |b, k| if dist(k) < dist(b) { k } else { b });
            best == l
        })
        .count();
    100.0 * correct as f64 / bundle.test.len() as f64
}

/// Size of one record in the CIFAR-10 binary distribution.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn parse_cifar(bytes: &[u8], what: &str) -> Result<Split, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Invalid(format!(
            "{what}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut split = Split {
        images: Vec::with_capacity(bytes.len()),
        labels: Vec::with_capacity(bytes.len() / CIFAR_RECORD),
    };
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        split.labels.push(rec[0] as usize);
        split.images.extend_from_slice(&rec[1..]);
    }
    Ok(split)
}

/// Converts CIFAR-10 binary batch files into a bundle.
pub fn import_cifar10(train_files: &[&Path], test_file: &Path) -> Result<DatasetBundle, DataError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let mut train = Split {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for p in train_files {
        let s = parse_cifar(&read(p)?, &p.display().to_string())?;
        train.images.extend(s.images);
        train.labels.extend(s.labels);
    }
    let test = parse_cifar(&read(test_file)?, &test_file.display().to_string())?;
    DatasetBundle::new(10, [3, 32, 32], train, test)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn tiny() -> DatasetBundle {
        let train = Split {
            images: (0..10 * 4).map(|i| (i * 7 % 256) as u8).collect(),
            labels: (0..10).map(|i| i % 3).collect(),
        };
        let test = Split {
            images: vec![1, 2, 3, 4],
            labels: vec![2],
        };
        DatasetBundle::new(3, [1, 2, 2], train, test).unwrap()
    }

    #[test]
    fn byte_round_trip() {
        let b = tiny();
        let bytes = b.to_bytes();
        let back = DatasetBundle::from_bytes(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn distinct_load_errors() {
        let bytes = tiny().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DatasetBundle::from_bytes(&bad), Err(DataError::BadMagic(_))));
        assert!(matches!(
            DatasetBundle::from_bytes(&bytes[..bytes.len() - 1]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(DatasetBundle::from_bytes(&bytes[..10]), Err(DataError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(DatasetBundle::from_bytes(&long), Err(DataError::TrailingBytes(1))));
        let mut label = bytes.clone();
        let n = label.len();
        label[n - 2] = 3;
        assert!(matches!(
            DatasetBundle::from_bytes(&label),
            Err(DataError::LabelOutOfRange { split: "test", label: 3, .. })
        ));
    }

    #[test]
    fn label_equal_to_class_count_rejected() {
        let split = Split {
            images: vec![0; 4],
            labels: vec![10],
        };
        let err = DatasetBundle::new(10, [1, 2, 2], split.clone(), split).unwrap_err();
        assert!(matches!(err, DataError::LabelOutOfRange { label: 10, classes: 10, .. }));
    }

    #[test]
    fn empty_test_split_rejected() {
        let train = Split {
            images: vec![0; 4],
            labels: vec![0],
        };
        let empty = Split {
            images: vec![],
            labels: vec![],
        };
        assert!(matches!(DatasetBundle::new(2, [1, 2, 2], train, empty), Err(DataError::EmptySplit("test"))));
    }

    #[test]
    fn batch_sizes_and_order() {
        let b = tiny();
        let sizes: Vec<usize> = b.batches::<f32>(SplitKind::Train, 3, None).map(|x| x.labels.len()).collect();
        assert_eq!(sizes, [3, 3, 3, 1]);
        let order: Vec<usize> = b.batches::<f32>(SplitKind::Train, 3, None).flat_map(|x| x.indices).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
        let a: Vec<usize> = b.batches::<f32>(SplitKind::Train, 4, Some((5, 1))).flat_map(|x| x.indices).collect();
        let again: Vec<usize> = b.batches::<f32>(SplitKind::Train, 4, Some((5, 1))).flat_map(|x| x.indices).collect();
        let other: Vec<usize> = b.batches::<f32>(SplitKind::Train, 4, Some((5, 2))).flat_map(|x| x.indices).collect();
        assert_eq!(a, again);
        assert_ne!(a, other);
        assert_eq!(a.iter().copied().collect::<HashSet<_>>().len(), 10);
    }

    #[test]
    fn normalized_train_is_standardized() {
        let b = synth_dataset(3, 40, 12, 12, 1).unwrap();
        let vals: Vec<f64> = b
            .batches::<f64>(SplitKind::Train, 16, Some((0, 0)))
            .flat_map(|x| x.images.to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((std - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let a = synth_dataset(3, 200, 32, 32, 7).unwrap();
        assert_eq!(a.train.images.len(), 600 * 32 * 32);
        assert_eq!(a.train.labels.len(), 600);
        assert_eq!(a.image_shape(), [1, 32, 32]);
        assert_eq!(a, synth_dataset(3, 200, 32, 32, 7).unwrap());
        assert_ne!(a, synth_dataset(3, 200, 32, 32, 8).unwrap());
        assert!(synth_dataset(1, 10, 8, 8, 0).is_err());
    }

    #[test]
    fn synth_passes_centroid_oracle() {
        let b = synth_dataset(4, 200, 32, 32, 3).unwrap();
        let acc = nearest_centroid_accuracy(&b);
        assert!(acc >= 80.0, "centroid accuracy {acc}");
    }

    #[test]
    fn cifar_records_parse() {
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let split = parse_cifar(&rec, "x").unwrap();
        assert_eq!(split.labels, vec![7]);
        assert_eq!(split.images.len(), 3072);
        assert!(parse_cifar(&rec[..100], "x").is_err());
    }
}
