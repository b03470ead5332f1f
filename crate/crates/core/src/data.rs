//! Image datasets: a procedural CIFAR-shaped generator and a reader for the
//! CIFAR-10 binary format.
//!
//! The generator is indexed: sample `i` depends only on `(seed, i)`, so
//! disjoint index ranges are disjoint splits.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, Tensor};

/// Images with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        images.dims4()?;
        if images.count() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.count(),
                labels.len()
            )));
        }
        Ok(Self { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_items(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice_items(0, n),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
        }
    }

    /// Consecutive batches in dataset order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (ImageBatch, &[usize])> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |s| {
            let e = (s + bs).min(self.len());
            (self.images.slice_items(s, e), &self.labels[s..e])
        })
    }

    /// Batches over a seeded permutation of the samples.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<(ImageBatch, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|idx| {
                (
                    self.images.select_items(idx),
                    idx.iter().map(|&i| self.labels[i]).collect(),
                )
            })
            .collect()
    }
}

/// Where a split's images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Procedural shapes and textures.
    Synthetic {
        seed: u64,
        #[serde(default = "default_size")]
        image_size: usize,
        /// Upper bound of the per-image Gaussian sensor-noise std.
        #[serde(default = "default_sensor_noise")]
        sensor_noise: f64,
    },
    /// CIFAR-10 binary batches (`data_batch_*.bin` / `test_batch.bin`),
    /// concatenated in the listed order.
    Cifar10Bin { files: Vec<PathBuf> },
}

fn default_size() -> usize {
    32
}

fn default_sensor_noise() -> f64 {
    DEFAULT_SENSOR_NOISE
}

impl DatasetSource {
    pub fn class_count(&self) -> usize {
        10
    }

    /// Samples `[offset, offset + count)`.
    pub fn load(&self, offset: usize, count: usize) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { seed, image_size, sensor_noise } => {
                if !(0.0..=0.5).contains(sensor_noise) {
                    return Err(Error::contract(format!("sensor_noise {sensor_noise} outside [0, 0.5]")));
                }
                Ok(SyntheticShapes { sensor_noise: *sensor_noise, ..SyntheticShapes::new(*seed, *image_size) }.generate(offset, count))
            }
            DatasetSource::Cifar10Bin { files } => load_cifar10_bin(files, offset, count),
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetSource::Synthetic { image_size, .. } => [3, *image_size, *image_size],
            DatasetSource::Cifar10Bin { .. } => [3, 32, 32],
        }
    }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn load_cifar10_bin(files: &[PathBuf], offset: usize, count: usize) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(f)?);
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            what: "CIFAR-10 binary",
            detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let total = bytes.len() / CIFAR_RECORD;
    if offset + count > total {
        return Err(Error::contract(format!(
            "requested samples {offset}..{} but only {total} available",
            offset + count
        )));
    }
    let mut data = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    for rec in bytes[offset * CIFAR_RECORD..(offset + count) * CIFAR_RECORD].chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format {
                what: "CIFAR-10 binary",
                detail: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![count, 3, 32, 32], data)?, labels, 10)
}

/// Writes a dataset in CIFAR-10 binary layout (values quantised to bytes).
pub fn write_cifar10_bin(ds: &Dataset, path: &Path) -> Result<()> {
    let (_, c, h, w) = ds.images.dims4()?;
    if [c, h, w] != [3, 32, 32] {
        return Err(Error::shape("CIFAR-10 layout needs 3×32×32 images"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(ds.images.item(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Ten classes of shapes and textures on random backgrounds:
/// disk, square, triangle, ring, cross, horizontal stripes, vertical
/// stripes, diagonal stripes, checkerboard, scattered dots.
#[derive(Clone, Debug)]
pub struct SyntheticShapes {
    pub seed: u64,
    pub size: usize,
    /// Each image draws its noise std uniformly from `[0.2, 1] · sensor_noise`.
    pub sensor_noise: f64,
}

pub const DEFAULT_SENSOR_NOISE: f64 = 0.1;

pub const SHAPE_CLASSES: [&str; 10] = [
    "disk", "square", "triangle", "ring", "cross", "h-stripes", "v-stripes", "d-stripes", "checker", "dots",
];

impl SyntheticShapes {
    pub fn new(seed: u64, size: usize) -> Self {
        Self { seed, size, sensor_noise: DEFAULT_SENSOR_NOISE }
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    pub fn generate(&self, offset: usize, count: usize) -> Dataset {
        let s = self.size;
        let mut data = Vec::with_capacity(count * 3 * s * s);
        let mut labels = Vec::with_capacity(count);
        for i in offset..offset + count {
            let (img, label) = self.sample(i);
            data.extend(img);
            labels.push(label);
        }
        Dataset::new(
            Tensor::new(vec![count, 3, s, s], data).expect("sizes agree"),
            labels,
            10,
        )
        .expect("labels agree")
    }

    /// One `(3·size·size)` image and its label.
    pub fn sample(&self, index: usize) -> (Vec<f64>, usize) {
        let mut rng = self.rng_for(index);
        let label = rng.random_range(0..10);
        let s = self.size as f64;
        let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let fg = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let d: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d > 0.35 {
                break c;
            }
        };
        let scale = s / 32.0;
        let cx = s / 2.0 + rng.random_range(-5.0..5.0) * scale;
        let cy = s / 2.0 + rng.random_range(-5.0..5.0) * scale;
        let theta = rng.random_range(0.0..PI);
        let jitter = rng.random_range(-0.17..0.17);
        let size = rng.random_range(6.0..10.5) * scale;
        let period = rng.random_range(4.0..8.0) * scale;
        let phase = rng.random_range(0.0..1.0);
        let dots: Vec<(f64, f64, f64)> = (0..rng.random_range(5..9))
            .map(|_| {
                (
                    rng.random_range(3.0..s - 3.0),
                    rng.random_range(3.0..s - 3.0),
                    rng.random_range(1.6..2.8) * scale,
                )
            })
            .collect();
        // clutter patch in a third colour
        let clutter = rng.random_bool(0.5).then(|| {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let x0 = rng.random_range(0.0..s - 6.0);
            let y0 = rng.random_range(0.0..s - 6.0);
            (c, x0, y0, rng.random_range(3.0..6.0) * scale)
        });
        let illum = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
        let noise_std = self.sensor_noise * (0.2 + 0.8 * rng.random::<f64>());
        let normal = Normal::new(0.0, noise_std).expect("positive std");

        let mask = |x: f64, y: f64| -> f64 {
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (dx * theta.cos() + dy * theta.sin(), -dx * theta.sin() + dy * theta.cos());
            let r = (dx * dx + dy * dy).sqrt();
            let edge = |d: f64| (0.5 - d).clamp(0.0, 1.0); // d < 0 inside
            match label {
                0 => edge(r - size),
                1 => edge(u.abs().max(v.abs()) - size * 0.8),
                2 => {
                    // equilateral triangle via three half-planes
                    let mut d = f64::NEG_INFINITY;
                    for k in 0..3 {
                        let a = theta + k as f64 * 2.0 * PI / 3.0;
                        d = d.max(dx * a.cos() + dy * a.sin() - size * 0.55);
                    }
                    edge(d)
                }
                3 => edge((r - size).abs() - 1.6 * scale),
                4 => edge((u.abs().min(v.abs()) - 1.8 * scale).max(u.abs().max(v.abs()) - size)),
                5..=7 => {
                    let a = match label {
                        5 => 0.0,
                        6 => PI / 2.0,
                        _ => PI / 4.0,
                    } + jitter;
                    let t = (x * a.sin() + y * a.cos()) / period + phase;
                    if (t * 2.0 * PI).sin() > 0.0 { 1.0 } else { 0.0 }
                }
                8 => {
                    let gx = ((x / period + phase).floor() as i64).rem_euclid(2);
                    let gy = ((y / period + phase).floor() as i64).rem_euclid(2);
                    (gx ^ gy) as f64
                }
                _ => dots
                    .iter()
                    .map(|&(px, py, pr)| edge(((x - px).powi(2) + (y - py).powi(2)).sqrt() - pr))
                    .fold(0.0, f64::max),
            }
        };

        let n = self.size;
        let mut img = vec![0.0; 3 * n * n];
        for yi in 0..n {
            for xi in 0..n {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let m = mask(x, y);
                let light = 1.0 + illum.0 * (x / s - 0.5) + illum.1 * (y / s - 0.5);
                for ch in 0..3 {
                    let mut v = bg[ch] * (1.0 - m) + fg[ch] * m;
                    if let Some((cc, x0, y0, w)) = clutter {
                        if x >= x0 && x < x0 + w && y >= y0 && y < y0 + w {
                            v = cc[ch];
                        }
                    }
                    v = v * light + normal.sample(&mut rng);
                    img[(ch * n + yi) * n + xi] = v.clamp(0.0, 1.0);
                }
            }
        }
        (img, label)
    }
}
