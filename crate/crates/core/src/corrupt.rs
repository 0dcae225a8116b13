//! A fixed suite of eight image corruptions at five severities.
//!
//! Parameters per severity 1..=5 (images in `[0, 1]`):
//!
//! | kind           | parameter                          | values                        |
//! |----------------|------------------------------------|-------------------------------|
//! | gaussian_noise | noise sd                           | 0.04, 0.06, 0.08, 0.09, 0.10  |
//! | shot_noise     | photon count scale c, Poisson(cx)/c | 500, 250, 100, 75, 50        |
//! | impulse_noise  | fraction of salt-and-pepper pixels | 0.01, 0.02, 0.03, 0.05, 0.07  |
//! | box_blur       | passes of a 3x3 box filter         | 1, 2, 3, 4, 6                 |
//! | brightness     | additive shift                     | 0.05, 0.10, 0.15, 0.20, 0.30  |
//! | contrast       | scale about the channel mean       | 0.75, 0.50, 0.40, 0.30, 0.15  |
//! | pixelate       | block side (fixed grid)            | 2, 3, 4, 5, 6                 |
//! | saturate       | chroma gain about the pixel gray   | 1.5, 2, 3, 5, 8               |
//!
//! Saturation acts on colour only and leaves single-channel images unchanged.
//! Severity 0 is the identity for every kind. Outputs are clamped to
//! `[0, 1]`; noise draws are seeded per (image index, corruption).

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    /// Severity parameter for severity 1..=5.
    pub fn parameter(self, severity: u8) -> f64 {
        let table: [f64; 5] = match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::BoxBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.20, 0.30],
            CorruptionKind::Contrast => [0.75, 0.50, 0.40, 0.30, 0.15],
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
            CorruptionKind::Saturate => [1.5, 2.0, 3.0, 5.0, 8.0],
        };
        table[severity as usize - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5; 0 is the identity.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = Self { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(kind: CorruptionKind) -> Self {
        Self { kind, severity: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > 5 {
            return Err(invalid(format!("corruption severity {} outside 1..=5", self.severity)));
        }
        Ok(())
    }

    /// All kinds at all five severities.
    pub fn full_suite() -> Vec<CorruptionSpec> {
        CorruptionKind::ALL
            .iter()
            .flat_map(|&kind| (1..=5).map(move |severity| CorruptionSpec { kind, severity }))
            .collect()
    }

    fn stream_index(&self, image: usize) -> u64 {
        (image as u64) << 8 | (self.kind as u64) << 3 | self.severity as u64
    }
}

fn box_blur_pass(img: &mut [f64], c: usize, h: usize, w: usize) {
    let src = img.to_vec();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for dr in [-1isize, 0, 1] {
                    for dc in [-1isize, 0, 1] {
                        let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                        let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        acc += plane[rr * w + cc];
                    }
                }
                img[ch * h * w + r * w + col] = acc / 9.0;
            }
        }
    }
}

/// Corrupts one image given as a (C, H, W) slice.
pub fn corrupt_image(img: &[f32], shape: [usize; 3], spec: CorruptionSpec, rng: &mut impl Rng) -> Result<Vec<f32>> {
    spec.validate()?;
    let [c, h, w] = shape;
    if img.len() != c * h * w {
        return Err(invalid("image length does not match its shape"));
    }
    if spec.severity == 0 {
        return Ok(img.to_vec());
    }
    let p = spec.kind.parameter(spec.severity);
    let mut x: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            for v in &mut x {
                let z: f64 = rng.sample(StandardNormal);
                *v += p * z;
            }
        }
        CorruptionKind::ShotNoise => {
            for v in &mut x {
                let lam = v.max(0.0) * p;
                *v = if lam > 0.0 {
                    Poisson::new(lam).map_err(|e| invalid(e.to_string()))?.sample(rng) / p
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in &mut x {
                if rng.random::<f64>() < p {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::BoxBlur => {
            for _ in 0..p as usize {
                box_blur_pass(&mut x, c, h, w);
            }
        }
        CorruptionKind::Brightness => x.iter_mut().for_each(|v| *v += p),
        CorruptionKind::Contrast => {
            for plane in x.chunks_mut(h * w) {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                plane.iter_mut().for_each(|v| *v = (*v - mean) * p + mean);
            }
        }
        CorruptionKind::Pixelate => {
            let b = p as usize;
            for plane in x.chunks_mut(h * w) {
                for r0 in (0..h).step_by(b) {
                    for c0 in (0..w).step_by(b) {
                        let (r1, c1) = ((r0 + b).min(h), (c0 + b).min(w));
                        let mut acc = 0.0;
                        for r in r0..r1 {
                            acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                        }
                        let mean = acc / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            plane[r * w + c0..r * w + c1].iter_mut().for_each(|v| *v = mean);
                        }
                    }
                }
            }
        }
        CorruptionKind::Saturate => {
            if c > 1 {
                for i in 0..h * w {
                    let gray = (0..c).map(|ch| x[ch * h * w + i]).sum::<f64>() / c as f64;
                    for ch in 0..c {
                        let v = &mut x[ch * h * w + i];
                        *v = gray + p * (*v - gray);
                    }
                }
            }
        }
    }
    Ok(x.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect())
}

/// Corrupted copy of a dataset; image `i` draws noise from a stream keyed by
/// `(seed, i, spec)`.
pub fn corrupt_dataset(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let shape = ds.sample_shape();
    let mut out = Vec::with_capacity(ds.images.len());
    for i in 0..ds.len() {
        let mut rng = substream(seed, Stream::Corruption, spec.stream_index(i));
        out.extend(corrupt_image(ds.images.row(i), shape, spec, &mut rng)?);
    }
    Dataset::new(
        Tensor::new(ds.images.shape().to_vec(), out)?,
        ds.labels.clone(),
        ds.sample_ids.clone(),
        ds.class_count,
    )
}
