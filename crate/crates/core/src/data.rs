//! Datasets, the CIFAR-100 binary loader, synthetic tasks and batch iteration.
//!
//! Images are stored as `f32` in `[0, 1]`, shape (N, C, H, W); vector data
//! uses (N, D, 1, 1). Batches are converted to the training precision on
//! demand.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Container, Entry, EntryData};
use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 2 + 3072;
pub const CIFAR100_CLASSES: usize = 100;

/// A mini-batch with original labels and dataset-level sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl<T: Real> Batch<T> {
    pub fn select(&self, idx: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            x: self.x.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, sample_ids: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(invalid(format!("images must be (N, C, H, W), got {:?}", images.shape())));
        }
        if labels.len() != images.rows() || sample_ids.len() != labels.len() {
            return Err(invalid("images, labels and sample ids disagree in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        let mut sorted = sample_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("sample ids must be unique"));
        }
        Ok(Self {
            images,
            labels,
            sample_ids,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given rows into a batch in precision `T`.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<Batch<T>> {
        Ok(Batch {
            x: self.images.select_rows(idx)?.cast(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.sample_ids[i]).collect(),
        })
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset::new(
            self.images.select_rows(&idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.sample_ids[i]).collect(),
            self.class_count,
        )
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({"kind": "dataset", "class_count": self.class_count}));
        c.push(Entry::real("images", &self.images));
        for (name, v) in [("labels", &self.labels), ("sample_ids", &self.sample_ids)] {
            c.push(Entry {
                name: name.into(),
                shape: vec![v.len()],
                data: EntryData::U32(v.iter().map(|&x| x as u32).collect()),
            });
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("dataset") {
            return Err(Error::Format("container does not hold a dataset".into()));
        }
        let class_count = c
            .meta
            .get("class_count")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("dataset without class_count".into()))? as usize;
        let get = |name: &str| c.get(name).ok_or_else(|| Error::Format(format!("dataset is missing {name}")));
        let ints = |name: &str| -> Result<Vec<usize>> {
            match &get(name)?.data {
                EntryData::U32(v) => Ok(v.iter().map(|&x| x as usize).collect()),
                _ => Err(Error::Format(format!("{name} must be integer"))),
            }
        };
        Dataset::new(get("images")?.tensor()?, ints("labels")?, ints("sample_ids")?, class_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Parses CIFAR-100 binary records (coarse label, fine label, 3072 pixel
/// bytes in channel-planar row-major order). The fine label is used.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "truncated CIFAR file: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR100_CLASSES {
            return Err(Error::Format(format!("record {i}: fine label {fine} >= {CIFAR100_CLASSES}")));
        }
        labels.push(fine);
        pixels.extend(rec[2..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::new(vec![n, 3, 32, 32], pixels)?,
        labels,
        (0..n).collect(),
        CIFAR100_CLASSES,
    )
}

pub fn load_cifar100_binary(path: &Path) -> Result<Dataset> {
    parse_cifar100(&std::fs::read(path)?)
}

/// Sample layout of a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SynthShape {
    /// Gaussian clusters in `[0, 1]^dim`, stored as (N, dim, 1, 1).
    Vector { dim: usize },
    /// Oriented sinusoidal gratings, one orientation per class.
    Image { channels: usize, height: usize, width: usize },
}

/// Generates `per_class` samples of every class. `split` selects an
/// independent draw (0 = train, 1 = test, ...); class layout (cluster
/// centers, orientations) depends only on `seed`.
pub fn synth_clusters(
    classes: usize,
    shape: SynthShape,
    per_class: usize,
    spread: f64,
    seed: u64,
    split: u64,
) -> Result<Dataset> {
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(invalid(format!("spread must be positive, got {spread}")));
    }
    if classes < 2 || per_class == 0 {
        return Err(invalid("need at least 2 classes and 1 sample per class"));
    }
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut rng = substream(seed, Stream::Data, 1 + split);
    let (dims, pixels) = match shape {
        SynthShape::Vector { dim } => {
            if dim == 0 {
                return Err(invalid("vector dimension must be positive"));
            }
            let mut layout = substream(seed, Stream::Data, 0);
            let centers: Vec<f64> = (0..classes * dim).map(|_| layout.random_range(0.2..0.8)).collect();
            let mut px = Vec::with_capacity(n * dim);
            for &y in &labels {
                for d in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    px.push((centers[y * dim + d] + spread * z).clamp(0.0, 1.0) as f32);
                }
            }
            ([dim, 1, 1], px)
        }
        SynthShape::Image { channels, height, width } => {
            if channels == 0 || height == 0 || width == 0 {
                return Err(invalid("image dimensions must be positive"));
            }
            let mut px = Vec::with_capacity(n * channels * height * width);
            for &y in &labels {
                let theta = PI * y as f64 / classes as f64;
                let (ct, st) = (theta.cos(), theta.sin());
                let freq = rng.random_range(1.5..2.5) / height.max(width) as f64;
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.25..0.4);
                let offset = rng.random_range(-0.1..0.1);
                for _ in 0..channels {
                    for r in 0..height {
                        for c in 0..width {
                            let t = 2.0 * PI * freq * (c as f64 * ct + r as f64 * st) + phase;
                            let z: f64 = rng.sample(StandardNormal);
                            let v = 0.5 + offset + amp * t.sin() + spread * z;
                            px.push(v.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
            ([channels, height, width], px)
        }
    };
    Dataset::new(
        Tensor::new(vec![n, dims[0], dims[1], dims[2]], pixels)?,
        labels,
        (0..n).collect(),
        classes,
    )
}

/// Per-epoch sample order keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, Stream::Shuffle, epoch));
    idx
}

/// Row indices of each batch in one epoch; the final partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    Ok(epoch_order(n, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffled batches of one epoch.
pub fn batches<T: Real>(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch<T>>> {
    batch_indices(dataset.len(), batch_size, seed, epoch)?
        .iter()
        .map(|idx| dataset.batch(idx))
        .collect()
}

/// Batches in storage order (evaluation).
pub fn sequential_batches<T: Real>(dataset: &Dataset, batch_size: usize) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    idx.chunks(batch_size).map(|c| dataset.batch(c)).collect()
}
