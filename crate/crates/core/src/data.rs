//! Image batches, the CIFAR-10 binary format, a synthetic dataset with known
//! frequency structure, and deterministic batching.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `B x C x H x W` images in `[0, 1]` with one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::shape("image batch", &[0, 0, 0, 0], s));
        }
        if s[0] != labels.len() {
            return Err(Error::shape("image batch labels", &[s[0]], &[labels.len()]));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { images, labels })
    }

    /// Empty batch with the given per-image geometry.
    pub fn empty(c: usize, h: usize, w: usize) -> Self {
        Self {
            images: Tensor::new(vec![0, c, h, w], vec![]).expect("empty tensor"),
            labels: vec![],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(B, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.images.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn image_len(&self) -> usize {
        let (_, c, h, w) = self.dims();
        c * h * w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gathers the listed examples, in order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let (_, c, h, w) = self.dims();
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Keeps only examples whose label is in `classes`, relabelled to their
    /// position in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> ImageBatch {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let mut out = self.select(&idx);
        for l in &mut out.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered label");
        }
        out
    }

    /// Same labels with new pixel data of identical shape.
    pub fn with_images(&self, data: Vec<f32>) -> Result<ImageBatch> {
        let images = Tensor::new(self.images.shape().to_vec(), data)?;
        ImageBatch::new(images, self.labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: ImageBatch,
    pub test: ImageBatch,
    pub num_classes: usize,
    pub provenance: String,
    /// True when the splits are disjoint by construction.
    pub disjoint: bool,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            if let Some(&l) = split.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::invalid(format!(
                    "{name} label {l} outside {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Parses concatenated CIFAR-10 records: one label byte followed by the red,
/// green and blue 32x32 planes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<ImageBatch> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "length {} is not a multiple of {CIFAR_RECORD}; truncated record starts at byte offset {offset}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n == 0 {
        log::warn!("{}: empty file, split has no examples", path.display());
        return Ok(ImageBatch::empty(CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("label byte {label} > 9 at byte offset {}", i * CIFAR_RECORD),
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| byte_to_unit(b)));
    }
    let images = Tensor::new(vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Ok(ImageBatch { images, labels })
}

pub fn read_cifar10(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_cifar10(&bytes, path)
}

/// Loads and concatenates the train files and the test files.
pub fn load_cifar10_bin(train: &[PathBuf], test: &[PathBuf]) -> Result<Dataset> {
    let load = |paths: &[PathBuf]| -> Result<ImageBatch> {
        let parts = paths.iter().map(|p| read_cifar10(p)).collect::<Result<Vec<_>>>()?;
        Ok(concat(&parts, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE))
    };
    let names = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let ds = Dataset {
        train: load(train)?,
        test: load(test)?,
        num_classes: CIFAR_CLASSES,
        provenance: format!("cifar10-bin train=[{}] test=[{}]", names(train), names(test)),
        disjoint: true,
    };
    Ok(ds)
}

pub fn concat(parts: &[ImageBatch], c: usize, h: usize, w: usize) -> ImageBatch {
    let n: usize = parts.iter().map(ImageBatch::len).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend_from_slice(&p.labels);
    }
    ImageBatch {
        images: Tensor::new(vec![n, c, h, w], data).expect("concatenated shape"),
        labels,
    }
}

/// Encodes a batch as CIFAR-10 records. Only 3x32x32 images with labels
/// below 10 fit the format.
pub fn encode_cifar10(batch: &ImageBatch) -> Result<Vec<u8>> {
    let (_, c, h, w) = batch.dims();
    if (c, h, w) != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) {
        return Err(Error::shape(
            "cifar10 record",
            &[CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
            &[c, h, w],
        ));
    }
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD);
    for i in 0..batch.len() {
        let label = batch.labels[i];
        if label >= CIFAR_CLASSES {
            return Err(Error::invalid(format!("label {label} does not fit the format")));
        }
        out.push(label as u8);
        out.extend(batch.image(i).iter().map(|&v| unit_to_byte(v)));
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, batch: &ImageBatch) -> Result<()> {
    fs::write(path, encode_cifar10(batch)?)?;
    Ok(())
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parameters of the synthetic generator.
///
/// Each image is
/// `0.5 + lf*L[y] + nuisance*N[i] + signature*S[y] + texture*s[c]*T[i] + noise`,
/// clamped to `[0, 1]` and rounded to 8-bit levels. `L` are smooth class
/// patterns and `N` smooth per-example patterns (both unit RMS); `S` is a
/// binary high-frequency class signature (values ±1); `T` is a per-example
/// high-frequency texture (unit RMS) whose channel weights `s` sum to zero.
/// Everything except `T` and part of the noise is identical across channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub lf_amplitude: f32,
    pub nuisance_amplitude: f32,
    pub signature_amplitude: f32,
    pub texture_amplitude: f32,
    pub noise_std: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_per_class: 100,
            test_per_class: 25,
            classes: 2,
            size: 16,
            channels: 3,
            lf_amplitude: 0.12,
            nuisance_amplitude: 0.12,
            signature_amplitude: 12.0 / 255.0,
            texture_amplitude: 0.08,
            noise_std: 0.02,
        }
    }
}

/// Frequencies (per axis, in cycles per image) below which a pattern counts
/// as low-frequency.
const LF_MAX: i64 = 2;

impl SynthConfig {
    pub fn new(seed: u64, n_per_class: usize, classes: usize, size: usize) -> Self {
        Self {
            seed,
            train_per_class: n_per_class,
            test_per_class: (n_per_class / 4).max(1),
            classes,
            size,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic dataset needs at least two classes"));
        }
        if self.size < 4 || self.channels == 0 {
            return Err(Error::invalid("synthetic images need size >= 4 and channels >= 1"));
        }
        Ok(())
    }

    /// Channel weights of the texture term: zero-mean across channels with
    /// `sum s_c^2 == channels` (all zero for a single channel).
    pub fn texture_weights(&self) -> Vec<f32> {
        let c = self.channels;
        if c < 2 {
            return vec![0.0; c];
        }
        (0..c)
            .map(|i| (2.0f64.sqrt() * (2.0 * PI * i as f64 / c as f64).cos()) as f32)
            .collect()
    }

    /// Predicted `||LFI|| / ||HFI||` across the channel axis of a raw image,
    /// ignoring clamping and rounding.
    pub fn expected_channel_ratio(&self) -> f64 {
        let c = self.channels as f64;
        let sq = |v: f32| (v as f64) * (v as f64);
        let shared = 0.25
            + sq(self.lf_amplitude)
            + sq(self.nuisance_amplitude)
            + sq(self.signature_amplitude)
            + sq(self.noise_std) / c;
        let s2: f64 = self.texture_weights().iter().map(|&v| sq(v)).sum();
        let varying = sq(self.texture_amplitude) * s2 + sq(self.noise_std) * (c - 1.0);
        (c * shared / varying).sqrt()
    }

    /// Smooth class pattern `L[y]` (unit RMS, `size x size`).
    pub fn class_pattern(&self, y: usize) -> Vec<f32> {
        let mut rng = self.rng(0x1000 + y as u64);
        smooth_pattern(&mut rng, self.size)
    }

    /// Binary high-frequency class signature `S[y]` (values ±1).
    pub fn class_signature(&self, y: usize) -> Vec<f32> {
        let mut rng = self.rng(0x2000 + y as u64);
        let p = high_pattern(&mut rng, self.size);
        p.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    fn split(&self, per_class: usize, stream: u64) -> ImageBatch {
        let (c, s) = (self.channels, self.size);
        let plane = s * s;
        let lf: Vec<Vec<f32>> = (0..self.classes).map(|y| self.class_pattern(y)).collect();
        let sig: Vec<Vec<f32>> = (0..self.classes).map(|y| self.class_signature(y)).collect();
        let tw = self.texture_weights();
        let mut rng = self.rng(stream);
        let n = per_class * self.classes;
        let mut data = Vec::with_capacity(n * c * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % self.classes;
            let nuis = smooth_pattern(&mut rng, s);
            let tex = high_pattern(&mut rng, s);
            for &t_w in &tw {
                for p in 0..plane {
                    let e: f32 = rng.sample(StandardNormal);
                    let v = 0.5
                        + self.lf_amplitude * lf[y][p]
                        + self.nuisance_amplitude * nuis[p]
                        + self.signature_amplitude * sig[y][p]
                        + self.texture_amplitude * t_w * tex[p]
                        + self.noise_std * e;
                    data.push(byte_to_unit(unit_to_byte(v)));
                }
            }
            labels.push(y);
        }
        ImageBatch {
            images: Tensor::new(vec![n, c, s, s], data).expect("synthetic shape"),
            labels,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        Ok(Dataset {
            train: self.split(self.train_per_class, 1),
            test: self.split(self.test_per_class, 2),
            num_classes: self.classes,
            provenance: format!(
                "synth seed={} classes={} size={} train/class={} test/class={}",
                self.seed, self.classes, self.size, self.train_per_class, self.test_per_class
            ),
            disjoint: true,
        })
    }
}

pub fn synth_dataset(seed: u64, n_per_class: usize, classes: usize, size: usize) -> Result<Dataset> {
    SynthConfig::new(seed, n_per_class, classes, size).generate()
}

fn cos_pattern(rng: &mut ChaCha8Rng, size: usize, freqs: &[(i64, i64)]) -> Vec<f32> {
    let mut out = vec![0.0f64; size * size];
    for &(u, v) in freqs {
        let amp: f64 = rng.sample(StandardNormal);
        let phase = rng.random::<f64>() * 2.0 * PI;
        for i in 0..size {
            for j in 0..size {
                let arg = 2.0 * PI * (u as f64 * i as f64 + v as f64 * j as f64) / size as f64;
                out[i * size + j] += amp * (arg + phase).cos();
            }
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let rms = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    out.iter().map(|v| ((v - mean) / rms) as f32).collect()
}

fn smooth_pattern(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let mut freqs = Vec::new();
    for u in 0..=LF_MAX {
        for v in -LF_MAX..=LF_MAX {
            if (u, v) > (0, 0) {
                freqs.push((u, v));
            }
        }
    }
    cos_pattern(rng, size, &freqs)
}

fn high_pattern(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let half = (size / 2) as i64;
    let lo = (size as i64 / 4).max(LF_MAX + 1);
    let mut freqs = Vec::new();
    for u in 0..=half {
        for v in -half + 1..=half {
            if u.max(v.abs()) >= lo {
                freqs.push((u, v));
            }
        }
    }
    cos_pattern(rng, size, &freqs)
}

/// Index order for one pass over `n` examples. Without shuffling this is
/// storage order; with it, a permutation fixed by `seed`.
pub fn batch_order(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Iterator over consecutive batches; the last partial batch is kept.
pub struct Batches<'a> {
    source: &'a ImageBatch,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        self.order.next().map(|idx| self.source.select(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.order.size_hint()
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batches(split: &ImageBatch, batch_size: usize, shuffle: bool, seed: u64) -> Batches<'_> {
    Batches {
        source: split,
        order: batch_order(split.len(), batch_size, shuffle, seed).into_iter(),
    }
}

/// The fixed batch used to track per-epoch statistics: the first unshuffled
/// batch.
pub fn probe_batch(split: &ImageBatch, batch_size: usize) -> ImageBatch {
    split.take(batch_size)
}
