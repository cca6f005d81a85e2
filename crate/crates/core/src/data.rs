//! Image datasets.
//!
//! Binary files follow the CIFAR layout: fixed-size records of label
//! byte(s) followed by `3·S·S` pixel bytes stored as R, G, B planes, each
//! row-major. CIFAR-10 records carry one label byte; CIFAR-100 records carry
//! a coarse and a fine label byte (the fine label is used). Other datasets,
//! such as Tiny-ImageNet at 64×64 with 200 classes, are accepted once
//! converted to the two-label-byte layout.
//!
//! Loading scales pixels to `[0, 1]`. Per-channel normalization is a
//! separate, explicit step ([`Dataset::normalize_with`]) whose constants come
//! from the training split.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarFormat {
    /// 1 (label only) or 2 (coarse, fine).
    pub label_bytes: usize,
    pub image_size: usize,
    pub class_count: usize,
}

impl CifarFormat {
    pub const CIFAR10: Self = Self {
        label_bytes: 1,
        image_size: 32,
        class_count: 10,
    };
    pub const CIFAR100: Self = Self {
        label_bytes: 2,
        image_size: 32,
        class_count: 100,
    };
    pub const TINY_IMAGENET: Self = Self {
        label_bytes: 2,
        image_size: 64,
        class_count: 200,
    };

    pub const CHANNELS: usize = 3;

    pub fn pixel_bytes(&self) -> usize {
        Self::CHANNELS * self.image_size * self.image_size
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes + self.pixel_bytes()
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `count × channels × size × size`, row-major.
    images: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
    channels: usize,
    image_size: usize,
    split: Split,
    normalization: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
        channels: usize,
        image_size: usize,
        split: Split,
    ) -> Result<Self> {
        let per_image = channels * image_size * image_size;
        if labels.is_empty() || per_image == 0 {
            return Err(Error::Data(
                "dataset must contain at least one image".into(),
            ));
        }
        if images.len() != labels.len() * per_image {
            return Err(Error::Data(format!(
                "{} pixel values do not make {} images of {channels}×{image_size}×{image_size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel value".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            channels,
            image_size,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn normalization(&self) -> Option<&ChannelStats> {
        self.normalization.as_ref()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the given examples into a `B × C × S × S` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let shape = vec![
            indices.len(),
            self.channels,
            self.image_size,
            self.image_size,
        ];
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.image_size * self.image_size;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, values) in img.chunks(plane).enumerate() {
                for v in values {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt().max(1e-12)
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Applies `(x − mean) / std` per channel. Fails if already normalized.
    pub fn normalize_with(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        if stats.mean.len() != self.channels || stats.std.len() != self.channels {
            return Err(Error::Data(format!(
                "normalization constants for {} channels, dataset has {}",
                stats.mean.len(),
                self.channels
            )));
        }
        let plane = self.image_size * self.image_size;
        let n = self.image_len();
        for img in self.images.chunks_mut(n) {
            for (c, values) in img.chunks_mut(plane).enumerate() {
                values
                    .iter_mut()
                    .for_each(|v| *v = (*v - stats.mean[c]) / stats.std[c]);
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Appends another dataset with identical geometry.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if (other.channels, other.image_size, other.class_count)
            != (self.channels, self.image_size, self.class_count)
            || other.normalization != self.normalization
        {
            return Err(Error::Data(
                "cannot concatenate datasets with different layouts".into(),
            ));
        }
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        Ok(())
    }
}

/// Loads a CIFAR-layout file holding any positive number of records.
pub fn load_cifar_binary(path: &Path, format: &CifarFormat, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let record = format.record_len();
    if bytes.is_empty() || bytes.len() % record != 0 {
        let records = (bytes.len() / record).max(1) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: records * record as u64,
            actual: bytes.len() as u64,
        });
    }
    parse_records(&bytes, format, split)
}

/// Loads a CIFAR-layout file that must hold exactly `records` records.
pub fn load_cifar_binary_exact(
    path: &Path,
    format: &CifarFormat,
    split: Split,
    records: usize,
) -> Result<Dataset> {
    let len = fs::metadata(path)?.len();
    let expected = (records * format.record_len()) as u64;
    if len != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected,
            actual: len,
        });
    }
    load_cifar_binary(path, format, split)
}

fn parse_records(bytes: &[u8], format: &CifarFormat, split: Split) -> Result<Dataset> {
    let record = format.record_len();
    let count = bytes.len() / record;
    let mut images = Vec::with_capacity(count * format.pixel_bytes());
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks(record).enumerate() {
        let label = rec[format.label_bytes - 1] as usize;
        if label >= format.class_count {
            return Err(Error::Data(format!(
                "record {i}: label {label} out of range for {} classes (corrupt file?)",
                format.class_count
            )));
        }
        labels.push(label);
        images.extend(
            rec[format.label_bytes..]
                .iter()
                .map(|&b| f64::from(b) / 255.0),
        );
    }
    Dataset::new(
        images,
        labels,
        format.class_count,
        CifarFormat::CHANNELS,
        format.image_size,
        split,
    )
}

/// Writes an unnormalized dataset in CIFAR layout; pixels are quantized to
/// `round(255·x)`. A two-byte layout gets a zero coarse label.
pub fn write_cifar_binary(path: &Path, dataset: &Dataset, format: &CifarFormat) -> Result<()> {
    if dataset.normalization.is_some() {
        return Err(Error::Data("refusing to write a normalized dataset".into()));
    }
    if dataset.channels != CifarFormat::CHANNELS || dataset.image_size != format.image_size {
        return Err(Error::Data(
            "dataset geometry does not match the binary format".into(),
        ));
    }
    if dataset.class_count > format.class_count || format.class_count > 256 {
        return Err(Error::Data("labels do not fit the binary format".into()));
    }
    let mut out = Vec::with_capacity(dataset.len() * format.record_len());
    for (i, &label) in dataset.labels.iter().enumerate() {
        if format.label_bytes == 2 {
            out.push(0);
        }
        out.push(label as u8);
        out.extend(
            dataset
                .image(i)
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, out)?;
    Ok(())
}

/// Seeded per-class selection of `per_class` examples from each listed class;
/// labels are remapped to positions in `classes`. Selected examples keep
/// their original relative order.
pub fn subset(
    dataset: &Dataset,
    classes: &[usize],
    per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes.is_empty() || per_class == 0 {
        return Err(Error::Data(
            "subset needs at least one class and one example per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = Vec::with_capacity(classes.len() * per_class);
    for (new_label, &class) in classes.iter().enumerate() {
        if class >= dataset.class_count {
            return Err(Error::Data(format!("class {class} does not exist")));
        }
        if classes[..new_label].contains(&class) {
            return Err(Error::Data(format!("class {class} listed twice")));
        }
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == class)
            .collect();
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} examples, {per_class} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        picked.extend(members[..per_class].iter().map(|&i| (i, new_label)));
    }
    picked.sort_unstable();
    let mut images = Vec::with_capacity(picked.len() * dataset.image_len());
    let mut labels = Vec::with_capacity(picked.len());
    for (i, label) in picked {
        images.extend_from_slice(dataset.image(i));
        labels.push(label);
    }
    let mut out = Dataset::new(
        images,
        labels,
        classes.len(),
        dataset.channels,
        dataset.image_size,
        dataset.split,
    )?;
    out.normalization = dataset.normalization.clone();
    Ok(out)
}

/// Every example of the listed classes, labels remapped to positions in
/// `classes`.
pub fn select_classes(dataset: &Dataset, classes: &[usize]) -> Result<Dataset> {
    let counts: Vec<usize> = classes
        .iter()
        .map(|&c| dataset.labels.iter().filter(|&&l| l == c).count())
        .collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, &label) in dataset.labels.iter().enumerate() {
        if let Some(pos) = classes.iter().position(|&c| c == label) {
            images.extend_from_slice(dataset.image(i));
            labels.push(pos);
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {} has no examples", classes[k])));
    }
    let mut out = Dataset::new(
        images,
        labels,
        classes.len(),
        dataset.channels,
        dataset.image_size,
        dataset.split,
    )?;
    out.normalization = dataset.normalization.clone();
    Ok(out)
}

/// Noise level of synthetic images.
pub const SYNTHETIC_NOISE_STD: f64 = 0.3;

/// Class-conditional Gaussian-blob images (3 channels).
///
/// Class `c` of `k` places a blob of width `size/6` on a circle of radius
/// `size/4` around the image center at angle `2πc/k`, with channel
/// amplitudes that also rotate with `c`. The class templates are fixed; the
/// seed drives the blob jitter (±1 pixel), the additive Gaussian noise, and
/// the example order. Labels are balanced (`i mod k` before shuffling).
pub fn make_synthetic(n: usize, classes: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Data(format!(
            "need n >= classes >= 1, got n={n}, classes={classes}"
        )));
    }
    if image_size == 0 {
        return Err(Error::Data("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("positive std");
    let s = image_size as f64;
    let (radius, width) = (s / 4.0, (s / 6.0).max(0.5));
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let plane = image_size * image_size;
    let mut images = Vec::with_capacity(n * 3 * plane);
    for &label in &labels {
        let angle = std::f64::consts::TAU * label as f64 / classes as f64;
        let cx = (s - 1.0) / 2.0 + radius * angle.cos() + rng.random_range(-1.0..=1.0);
        let cy = (s - 1.0) / 2.0 + radius * angle.sin() + rng.random_range(-1.0..=1.0);
        for ch in 0..3 {
            let amplitude = 1.0 + 0.5 * (angle + ch as f64 * std::f64::consts::TAU / 3.0).cos();
            for y in 0..image_size {
                for x in 0..image_size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let blob = amplitude * (-d2 / (2.0 * width * width)).exp();
                    images.push(blob + noise.sample(&mut rng));
                }
            }
        }
    }
    Dataset::new(images, labels, classes, 3, image_size, Split::Train)
}

/// Padding used by [`augment_basic`].
pub const CROP_PADDING: i64 = 4;

/// Shifts a `C × S × S` image by `(dx, dy)` with zero fill (a crop of the
/// zero-padded image), then optionally mirrors it horizontally. `(0, 0)`
/// without flip is the identity.
pub fn crop_flip(
    image: &[f64],
    channels: usize,
    size: usize,
    dx: i64,
    dy: i64,
    flip: bool,
) -> Vec<f64> {
    let s = size as i64;
    let plane = size * size;
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..s {
            for x in 0..s {
                let sx = if flip { s - 1 - x } else { x } + dx;
                let sy = y + dy;
                if (0..s).contains(&sx) && (0..s).contains(&sy) {
                    out[c * plane + (y * s + x) as usize] =
                        image[c * plane + (sy * s + sx) as usize];
                }
            }
        }
    }
    out
}

/// Random crop from the 4-pixel zero-padded image plus a random horizontal
/// flip; fully determined by the rng state.
pub fn augment_basic<R: Rng>(image: &[f64], channels: usize, size: usize, rng: &mut R) -> Vec<f64> {
    let dx = rng.random_range(-CROP_PADDING..=CROP_PADDING);
    let dy = rng.random_range(-CROP_PADDING..=CROP_PADDING);
    let flip = rng.random_bool(0.5);
    crop_flip(image, channels, size, dx, dy, flip)
}
