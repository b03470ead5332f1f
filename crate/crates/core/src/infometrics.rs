//! Histogram-based normalized mutual information between images and CIELAB
//! channel histograms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::Preprocessor;
use crate::tensor::{ImageBatch, Tensor};

pub const DEFAULT_BINS: usize = 64;
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_image(t: &Tensor) -> Result<(usize, &[f64])> {
    match t.shape() {
        [c, _, _] | [1, c, _, _] => Ok((*c, t.data())),
        s => Err(Error::shape(format!("expected one image, got shape {s:?}"))),
    }
}

/// Per-pixel luminance of a channel-major image. Single-channel images pass
/// through unchanged.
pub fn luminance(data: &[f64], channels: usize) -> Result<Vec<f64>> {
    match channels {
        1 => Ok(data.to_vec()),
        3 => {
            let p = data.len() / 3;
            Ok((0..p).map(|i| LUMA[0] * data[i] + LUMA[1] * data[p + i] + LUMA[2] * data[2 * p + i]).collect())
        }
        c => Err(Error::shape(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

fn bin_of(v: f64, bins: usize) -> u16 {
    ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1) as u16
}

fn quantize_slice(data: &[f64], channels: usize, bins: usize) -> Result<Vec<u16>> {
    if bins == 0 || bins > u16::MAX as usize {
        return Err(Error::contract(format!("bin count {bins} out of range")));
    }
    Ok(luminance(data, channels)?.into_iter().map(|v| bin_of(v, bins)).collect())
}

/// Luminance mapped to `0..bins` by uniform bins over [0,1]; 1.0 falls in
/// the last bin.
pub fn quantize(image: &Tensor, bins: usize) -> Result<Vec<u16>> {
    let (c, data) = check_image(image)?;
    quantize_slice(data, c, bins)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub bins: usize,
    /// Row-major `bins x bins`, row = label in `a`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl JointHistogram {
    pub fn from_labels(a: &[u16], b: &[u16], bins: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::contract(format!("label maps differ in size: {} vs {}", a.len(), b.len())));
        }
        let mut counts = vec![0u64; bins * bins];
        for (&p, &q) in a.iter().zip(b) {
            let (p, q) = (p as usize, q as usize);
            if p >= bins || q >= bins {
                return Err(Error::contract(format!("label outside {bins} bins")));
            }
            counts[p * bins + q] += 1;
        }
        Ok(Self { bins, counts, total: a.len() as u64 })
    }

    pub fn get(&self, p: usize, q: usize) -> u64 {
        self.counts[p * self.bins + q]
    }

    pub fn marginal_a(&self) -> Vec<u64> {
        self.counts.chunks(self.bins).map(|r| r.iter().sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<u64> {
        (0..self.bins).map(|q| (0..self.bins).map(|p| self.get(p, q)).sum()).collect()
    }
}

pub fn joint_histogram(a: &Tensor, b: &Tensor, bins: usize) -> Result<JointHistogram> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    JointHistogram::from_labels(&quantize(a, bins)?, &quantize(b, bins)?, bins)
}

/// Shannon entropy in bits of a count vector.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// I = H(X) + H(Y) - H(X,Y) in bits, clamped at 0.
pub fn mutual_information(joint: &JointHistogram) -> f64 {
    let i = entropy(&joint.marginal_a()) + entropy(&joint.marginal_b()) - entropy(&joint.counts);
    i.max(0.0)
}

/// I / sqrt(H(X) H(Y)), zero when either side has zero entropy.
pub fn nmi_from_joint(joint: &JointHistogram) -> f64 {
    let hx = entropy(&joint.marginal_a());
    let hy = entropy(&joint.marginal_b());
    if hx <= 0.0 || hy <= 0.0 {
        return 0.0;
    }
    let h = entropy(&joint.counts);
    ((hx + hy - h).max(0.0) / (hx * hy).sqrt()).clamp(0.0, 1.0)
}

pub fn nmi(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    Ok(nmi_from_joint(&joint_histogram(a, b, bins)?))
}

fn nmi_slices(a: &[f64], b: &[f64], channels: usize, bins: usize) -> Result<f64> {
    let j = JointHistogram::from_labels(&quantize_slice(a, channels, bins)?, &quantize_slice(b, channels, bins)?, bins)?;
    Ok(nmi_from_joint(&j))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmiMode {
    Intra,
    Inter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmiReport {
    pub autoencoder: String,
    pub mode: NmiMode,
    pub bins: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

fn summarize(autoencoder: &str, mode: NmiMode, bins: usize, values: &[f64]) -> Result<NmiReport> {
    if values.is_empty() {
        return Err(Error::contract("no samples for nMI"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(NmiReport {
        autoencoder: autoencoder.to_owned(),
        mode,
        bins,
        mean: mean.clamp(0.0, 1.0),
        std: var.sqrt(),
        count: values.len(),
    })
}

fn batched(images: &ImageBatch, batch_size: usize, mut f: impl FnMut(&Tensor) -> Result<()>) -> Result<()> {
    let n = images.shape().first().copied().unwrap_or(0);
    let bs = batch_size.max(1);
    for start in (0..n).step_by(bs) {
        let x = images.slice_items(start, (start + bs).min(n));
        f(&x)?;
    }
    Ok(())
}

/// Mean and spread of nmi(x, ae(x)) over all images.
pub fn intra_nmi(ae: &dyn Preprocessor, images: &ImageBatch, bins: usize, batch_size: usize) -> Result<NmiReport> {
    let (_, c, _, _) = images.dims4()?;
    let mut values = Vec::new();
    batched(images, batch_size, |x| {
        let r = ae.apply(x)?;
        if r.shape() != x.shape() {
            return Err(Error::contract("reconstruction shape differs from input"));
        }
        for i in 0..x.shape()[0] {
            values.push(nmi_slices(x.item(i), r.item(i), c, bins)?);
        }
        Ok(())
    })?;
    summarize(ae.key(), NmiMode::Intra, bins, &values)
}

/// Mean and spread of nmi(ae(x_2k), ae(x_2k+1)) over consecutive pairs.
pub fn inter_nmi(ae: &dyn Preprocessor, images: &ImageBatch, bins: usize, batch_size: usize) -> Result<NmiReport> {
    let (n, c, _, _) = images.dims4()?;
    let usable = n - n % 2;
    let trimmed = images.slice_items(0, usable);
    let mut values = Vec::new();
    batched(&trimmed, batch_size + batch_size % 2, |x| {
        let r = ae.apply(x)?;
        for k in 0..x.shape()[0] / 2 {
            values.push(nmi_slices(r.item(2 * k), r.item(2 * k + 1), c, bins)?);
        }
        Ok(())
    })?;
    summarize(ae.key(), NmiMode::Inter, bins, &values)
}

pub fn write_reports_json(reports: &[NmiReport], path: &Path) -> Result<()> {
    crate::orchestrator::write_atomic(path, &serde_json::to_vec_pretty(reports)?)
}

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn inverse3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r: usize, k: usize| {
        let (r0, r1, k0, k1) = ((r + 1) % 3, (r + 2) % 3, (k + 1) % 3, (k + 2) % 3);
        m[r0][k0] * m[r1][k1] - m[r0][k1] * m[r1][k0]
    };
    let det = m[0][0] * c(0, 0) + m[0][1] * c(0, 1) + m[0][2] * c(0, 2);
    std::array::from_fn(|i| std::array::from_fn(|j| c(j, i) / det))
}

const DELTA: f64 = 6.0 / 29.0;

fn mat(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|r| r[0] * v[0] + r[1] * v[1] + r[2] * v[2])
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > DELTA.powi(3) {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t.powi(3)
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// sRGB in [0,1] to CIELAB under a D65 white point.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let xyz = mat(&RGB_TO_XYZ, rgb.map(srgb_to_linear));
    let [fx, fy, fz] = [f(xyz[0] / WHITE[0]), f(xyz[1] / WHITE[1]), f(xyz[2] / WHITE[2])];
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [WHITE[0] * f_inv(fx), WHITE[1] * f_inv(fy), WHITE[2] * f_inv(fz)];
    mat(&inverse3(&RGB_TO_XYZ), xyz).map(linear_to_srgb)
}

/// Converts a `[N,3,H,W]` or `[3,H,W]` tensor to LAB, channel by channel.
pub fn image_to_lab(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match t.shape() {
        &[c, h, w] => (1, c, h, w),
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(Error::shape(format!("expected image tensor, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("LAB conversion needs 3 channels"));
    }
    let p = h * w;
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for i in 0..n {
        let base = i * 3 * p;
        for k in 0..p {
            let lab = rgb_to_lab([src[base + k], src[base + p + k], src[base + 2 * p + k]]);
            for ch in 0..3 {
                dst[base + ch * p + k] = lab[ch];
            }
        }
    }
    Ok(out)
}

pub const LAB_RANGES: [(f64, f64); 3] = [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)];
pub const LAB_CHANNELS: [&str; 3] = ["L", "A", "B"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabHistogram {
    pub bins: usize,
    /// Per channel, `bins + 1` edges.
    pub edges: [Vec<f64>; 3],
    pub counts: [Vec<u64>; 3],
}

/// Per-channel histograms over the fixed LAB ranges; values outside a range
/// land in its end bins.
pub fn lab_channel_histograms(images: &Tensor, bins: usize) -> Result<LabHistogram> {
    if bins == 0 {
        return Err(Error::contract("bin count must be positive"));
    }
    let lab = image_to_lab(images)?;
    let (h, w) = (lab.shape()[lab.rank() - 2], lab.shape()[lab.rank() - 1]);
    let p = h * w;
    let mut counts: [Vec<u64>; 3] = std::array::from_fn(|_| vec![0; bins]);
    for (idx, &v) in lab.data().iter().enumerate() {
        let ch = (idx / p) % 3;
        let (lo, hi) = LAB_RANGES[ch];
        let b = (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[ch][b] += 1;
    }
    let edges = std::array::from_fn(|ch| {
        let (lo, hi) = LAB_RANGES[ch];
        (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
    });
    Ok(LabHistogram { bins, edges, counts })
}

impl LabHistogram {
    /// `channel,bin,lo,hi,count` rows.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["channel", "bin", "lo", "hi", "count"])?;
        for ch in 0..3 {
            for b in 0..self.bins {
                w.write_record([
                    LAB_CHANNELS[ch].to_owned(),
                    b.to_string(),
                    self.edges[ch][b].to_string(),
                    self.edges[ch][b + 1].to_string(),
                    self.counts[ch][b].to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })
    }
}
