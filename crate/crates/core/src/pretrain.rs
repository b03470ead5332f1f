//! Reconstruction pre-training of the autoencoder, and supervised training of
//! the classifier zoo that the autoencoder is later coupled to.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::modelzoo::{AutoencoderModel, ClassifierModel, Preprocessor};
use crate::nn::{self, loss, Mode, SgdMomentum};
use crate::tensor::{ImageBatch, Tensor};

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl From<[f64; 2]> for Span {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Span { lo: lo.min(hi), hi: lo.max(hi) }
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.lo, s.hi]
    }
}

impl Span {
    pub fn fixed(v: f64) -> Self {
        Span { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Which augmentations are active and how strong. `None` disables an entry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Zoom factor about the centre.
    pub scale: Option<Span>,
    /// Degrees.
    pub rotation: Option<Span>,
    /// Pixels, applied independently to x and y.
    pub shift: Option<Span>,
    /// Standard deviation of additive Gaussian noise.
    pub noise: Option<Span>,
    /// Probability of a 3×3 binomial blur.
    pub blur: Option<f64>,
    /// Additive intensity offset.
    pub brightness: Option<Span>,
    /// Multiplicative factor about the per-channel mean.
    pub contrast: Option<Span>,
    /// Per-channel multiplicative factor.
    pub color: Option<Span>,
    /// Probability of a horizontal flip.
    pub mirror: Option<f64>,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self == &AugmentConfig::default()
    }

    fn geometric(&self) -> bool {
        self.scale.is_some() || self.rotation.is_some() || self.shift.is_some()
    }
}

/// Bilinear sample with edge clamping.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Applies the configured augmentations independently per image. Output is
/// clamped to `[0, 1]`; with nothing enabled the input is returned as is.
pub fn augment(batch: &ImageBatch, config: &AugmentConfig, rng: &mut impl Rng) -> Result<ImageBatch> {
    let (_, c, h, w) = batch.dims4()?;
    if config.is_identity() {
        return Ok(batch.clone());
    }
    let mut out = batch.clone();
    let plane = h * w;
    for img in out.data_mut().chunks_exact_mut(c * plane) {
        if config.geometric() {
            let zoom = config.scale.map_or(1.0, |s| s.sample(rng)).max(0.05);
            let angle = config.rotation.map_or(0.0, |s| s.sample(rng)).to_radians();
            let (sx, sy) = match config.shift {
                Some(s) => (s.sample(rng), s.sample(rng)),
                None => (0.0, 0.0),
            };
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (cos, sin) = (angle.cos(), angle.sin());
            let src = img.to_vec();
            for ch in 0..c {
                let sp = &src[ch * plane..(ch + 1) * plane];
                for r in 0..h {
                    for col in 0..w {
                        // inverse map: output pixel -> source location
                        let (dy, dx) = (r as f64 - cy - sy, col as f64 - cx - sx);
                        let ux = (cos * dx + sin * dy) / zoom + cx;
                        let uy = (-sin * dx + cos * dy) / zoom + cy;
                        img[ch * plane + r * w + col] = sample_bilinear(sp, h, w, uy, ux);
                    }
                }
            }
        }
        if let Some(p) = config.mirror {
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                for row in img.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
        }
        if let Some(s) = config.color {
            for ch in img.chunks_exact_mut(plane) {
                let f = s.sample(rng);
                ch.iter_mut().for_each(|v| *v *= f);
            }
        }
        if let Some(s) = config.brightness {
            let d = s.sample(rng);
            img.iter_mut().for_each(|v| *v += d);
        }
        if let Some(s) = config.contrast {
            let f = s.sample(rng);
            for ch in img.chunks_exact_mut(plane) {
                let m = ch.iter().sum::<f64>() / plane as f64;
                ch.iter_mut().for_each(|v| *v = (*v - m) * f + m);
            }
        }
        if let Some(p) = config.blur {
            if rng.random_bool(p.clamp(0.0, 1.0)) {
                for ch in img.chunks_exact_mut(plane) {
                    blur3(ch, h, w);
                }
            }
        }
        if let Some(s) = config.noise {
            let std = s.sample(rng).abs();
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                img.iter_mut().for_each(|v| *v += normal.sample(rng));
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Separable `[1, 2, 1] / 4` blur with edge clamping.
fn blur3(plane: &mut [f64], h: usize, w: usize) {
    let src = plane.to_vec();
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = src[r * w + c.saturating_sub(1)];
            let rr = src[r * w + (c + 1).min(w - 1)];
            tmp[r * w + c] = 0.25 * l + 0.5 * src[r * w + c] + 0.25 * rr;
        }
    }
    for r in 0..h {
        for c in 0..w {
            let u = tmp[r.saturating_sub(1) * w + c];
            let d = tmp[(r + 1).min(h - 1) * w + c];
            plane[r * w + c] = 0.25 * u + 0.5 * tmp[r * w + c] + 0.25 * d;
        }
    }
}

/// Returns `current_lr · decay` when the trailing run of checks that failed
/// to beat the best earlier loss has just reached a multiple of `patience`;
/// otherwise `current_lr`. "Improve" means strictly lower than the best
/// earlier check. Counting in multiples means a decay also resets the
/// patience window.
pub fn plateau_schedule(losses: &[f64], current_lr: f64, decay: f64, patience: usize) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::contract("plateau schedule needs at least one check"));
    }
    if patience == 0 {
        return Err(Error::contract("patience must be at least 1"));
    }
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    for (i, &l) in losses.iter().enumerate() {
        if i > 0 && !(l < best) {
            streak += 1;
        } else {
            streak = 0;
        }
        best = best.min(l);
    }
    Ok(if streak > 0 && streak % patience == 0 {
        current_lr * decay
    } else {
        current_lr
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub patience_checks: usize,
    /// Samples between loss checks.
    pub check_interval: u64,
    pub max_samples: u64,
    /// Stream each sample at most once.
    pub single_pass: bool,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            momentum: 0.9,
            decay_factor: 0.2,
            patience_checks: 2,
            check_interval: 50_000,
            max_samples: 1_000_000,
            single_pass: false,
            batch_size: 16,
            augment: AugmentConfig::default(),
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            v.push(format!("decay_factor {} must lie in (0, 1)", self.decay_factor));
        }
        if self.patience_checks < 1 {
            v.push("patience_checks must be ≥ 1".to_string());
        }
        if self.check_interval < 1 {
            v.push("check_interval must be ≥ 1".to_string());
        }
        if self.batch_size < 1 {
            v.push("batch_size must be ≥ 1".to_string());
        }
        if !(self.initial_lr >= 0.0) {
            v.push("initial_lr must be non-negative".to_string());
        }
        if v.is_empty() { Ok(()) } else { Err(Error::Manifest(v)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub samples_seen: u64,
    /// Mean training MSE over the samples since the previous check.
    pub loss: f64,
    /// Learning rate in effect during the interval.
    pub lr: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub checks: Vec<CheckRecord>,
    pub steps: u64,
    pub samples_seen: u64,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "samples_seen,loss,lr,val_loss")?;
        for c in &self.checks {
            let val = c.val_loss.map(|v| format!("{v:.10}")).unwrap_or_default();
            writeln!(buf, "{},{:.10},{},{}", c.samples_seen, c.loss, c.lr, val)?;
        }
        crate::orchestrator::write_atomic(path, &buf)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut log = TrainingLog::default();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map_err(|e| Error::Format { what: "training log", detail: e.to_string() })
            };
            log.checks.push(CheckRecord {
                samples_seen: parse(0)? as u64,
                loss: parse(1)?,
                lr: parse(2)?,
                val_loss: rec.get(3).filter(|s| !s.is_empty()).and_then(|s| s.parse().ok()),
            });
        }
        log.samples_seen = log.checks.last().map_or(0, |c| c.samples_seen);
        Ok(log)
    }
}

/// Batches drawn from a dataset, either one shuffled pass or repeated
/// reshuffled epochs.
pub struct SampleStream<'a> {
    data: &'a ImageBatch,
    batch_size: usize,
    single_pass: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> SampleStream<'a> {
    pub fn new(data: &'a ImageBatch, batch_size: usize, single_pass: bool, seed: u64) -> Self {
        let mut s = Self {
            data,
            batch_size: batch_size.max(1),
            single_pass,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..data.count()).collect(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }
}

impl Iterator for SampleStream<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.order.is_empty() {
            return None;
        }
        if self.pos >= self.order.len() {
            if self.single_pass {
                return None;
            }
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.select_items(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Trains `ae` to reconstruct its input under momentum SGD, checking the
/// mean training loss every `check_interval` samples and decaying the
/// learning rate on plateaus.
pub fn pretrain(
    mut ae: AutoencoderModel,
    stream: impl IntoIterator<Item = ImageBatch>,
    config: &PretrainConfig,
    validation: Option<&ImageBatch>,
) -> Result<(AutoencoderModel, TrainingLog)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = SgdMomentum::new(config.initial_lr, config.momentum);
    let mut log = TrainingLog::default();
    let mut interval_sum = 0.0;
    let mut interval_count = 0u64;
    let mut next_check = config.check_interval;
    let mut history = Vec::new();

    let mut record = |ae: &AutoencoderModel,
                      log: &mut TrainingLog,
                      opt: &mut SgdMomentum,
                      sum: f64,
                      count: u64|
     -> Result<()> {
        let loss = sum / count as f64;
        let val_loss = validation.map(|v| reconstruction_mse(ae, v, 64)).transpose()?;
        log.checks.push(CheckRecord {
            samples_seen: log.samples_seen,
            loss,
            lr: opt.lr,
            val_loss,
        });
        history.push(loss);
        let new_lr = plateau_schedule(&history, opt.lr, config.decay_factor, config.patience_checks)?;
        if new_lr != opt.lr {
            info!("plateau after {} samples: lr {} -> {}", log.samples_seen, opt.lr, new_lr);
        }
        opt.lr = new_lr;
        Ok(())
    };

    for batch in stream {
        if log.samples_seen >= config.max_samples {
            break;
        }
        let remaining = (config.max_samples - log.samples_seen) as usize;
        let batch = if batch.count() > remaining {
            batch.slice_items(0, remaining)
        } else {
            batch
        };
        let n = batch.count() as u64;
        let x = augment(&batch, &config.augment, &mut rng)?;
        let (y, tape, updates) = ae.forward_tape(&x, Mode::Train)?;
        let (l, dy) = loss::mse(&y, &x)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                samples_seen: log.samples_seen,
                lr: opt.lr,
            });
        }
        let (eg, dg, _) = ae.backward(tape, dy, true, true)?;
        opt.step(&mut ae.encoder, &eg)?;
        opt.step(&mut ae.decoder, &dg)?;
        ae.apply_stat_updates(&updates)?;
        log.steps += 1;
        log.samples_seen += n;
        interval_sum += l * n as f64;
        interval_count += n;
        if log.samples_seen >= next_check {
            record(&ae, &mut log, &mut opt, interval_sum, interval_count)?;
            debug!("pretrain check: {:?}", log.checks.last());
            interval_sum = 0.0;
            interval_count = 0;
            while next_check <= log.samples_seen {
                next_check += config.check_interval;
            }
        }
    }
    if interval_count > 0 {
        record(&ae, &mut log, &mut opt, interval_sum, interval_count)?;
    }
    Ok((ae, log))
}

/// Mean over all pixels and samples of `(x − reconstruct(x))²`.
pub fn reconstruction_mse(ae: &dyn Preprocessor, data: &ImageBatch, batch_size: usize) -> Result<f64> {
    if data.count() == 0 {
        return Err(Error::contract("reconstruction error of an empty dataset"));
    }
    let mut sum = 0.0;
    let bs = batch_size.max(1);
    for s in (0..data.count()).step_by(bs) {
        let x = data.slice_items(s, (s + bs).min(data.count()));
        let y = ae.apply(&x)?;
        x.check_same_shape(&y)?;
        sum += x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sum / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epoch indices after which the learning rate is multiplied by 0.1.
    pub lr_steps: Vec<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.02,
            momentum: 0.9,
            batch_size: 32,
            lr_steps: vec![6],
            augment: AugmentConfig::default(),
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

/// Supervised cross-entropy training of a classifier (batch norm in
/// training mode). Refuses frozen models.
pub fn train_classifier(
    model: &mut ClassifierModel,
    data: &Dataset,
    config: &ClassifierTrainConfig,
) -> Result<Vec<EpochRecord>> {
    if model.frozen {
        return Err(Error::breach("train-classifiers", format!("{} is frozen", model.spec.name)));
    }
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = SgdMomentum::new(config.lr, config.momentum);
    let mut out = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (x, labels) in data.shuffled_batches(config.batch_size, &mut rng) {
            let x = augment(&x, &config.augment, &mut rng)?;
            let (logits, tape, ctx) = model.forward_tape(&x, Mode::Train)?;
            let (l, dlogits) = loss::cross_entropy(&logits, &labels)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { samples_seen: (epoch * data.len()) as u64, lr: opt.lr });
            }
            correct += argmax_rows(&logits)?.iter().zip(&labels).filter(|(p, y)| p == y).count();
            loss_sum += l * labels.len() as f64;
            let (_, grads) = model.backward(tape, dlogits, true)?;
            opt.step(&mut model.params, &grads)?;
            nn::apply_stat_updates(&mut model.params, &ctx.stat_updates)?;
        }
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            lr: opt.lr,
        };
        info!("{} epoch {epoch}: loss {:.4} acc {:.3}", model.spec.name, rec.loss, rec.train_accuracy);
        out.push(rec);
        if config.lr_steps.contains(&(epoch + 1)) {
            opt.lr *= 0.1;
        }
    }
    Ok(out)
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{build_autoencoder, builtin_zoo, Identity};

    #[test]
    fn plateau_examples() {
        assert_eq!(plateau_schedule(&[0.50, 0.45, 0.40], 0.01, 0.2, 2).unwrap(), 0.01);
        let decayed = plateau_schedule(&[0.40, 0.41, 0.405], 0.01, 0.2, 2).unwrap();
        assert_eq!(decayed, 0.01 * 0.2);
        assert_eq!(plateau_schedule(&[0.40, 0.41, 0.39], 0.01, 0.2, 2).unwrap(), 0.01);
        assert!(plateau_schedule(&[], 0.01, 0.2, 2).is_err());
    }

    #[test]
    fn plateau_waits_a_full_window_after_decay() {
        // decays at the 2nd and 4th stagnant check, not the 3rd
        let h = [0.4, 0.5, 0.5, 0.5, 0.5];
        let lrs: Vec<f64> = (1..=h.len()).map(|n| plateau_schedule(&h[..n], 1.0, 0.2, 2).unwrap()).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.2, 1.0, 0.2]);
    }

    #[test]
    fn augment_off_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| (i % 7) as f64 / 7.0);
        let y = augment(&x, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn forced_mirror_reverses_columns() {
        let x = Tensor::from_fn(&[1, 2, 3, 5], |i| (i as f64 * 0.37).fract());
        let cfg = AugmentConfig { mirror: Some(1.0), ..Default::default() };
        let y = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, c, h, w) = x.dims4().unwrap();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let src = x.data()[(ch * h + r) * w + (w - 1 - col)];
                    assert_eq!(y.data()[(ch * h + r) * w + col], src);
                }
            }
        }
    }

    #[test]
    fn brightness_clamps_at_one() {
        let x = Tensor::full(&[1, 3, 4, 4], 0.9);
        let cfg = AugmentConfig { brightness: Some(Span::fixed(0.2)), ..Default::default() };
        let y = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn full_augmentation_stays_in_range() {
        let x = Tensor::from_fn(&[3, 3, 8, 8], |i| (i as f64 * 0.173).fract());
        let cfg = AugmentConfig {
            scale: Some([0.8, 1.2].into()),
            rotation: Some([-20.0, 20.0].into()),
            shift: Some([-2.0, 2.0].into()),
            noise: Some([0.0, 0.3].into()),
            blur: Some(0.5),
            brightness: Some([-0.3, 0.3].into()),
            contrast: Some([0.5, 1.5].into()),
            color: Some([0.7, 1.3].into()),
            mirror: Some(0.5),
        };
        let y = augment(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(y.shape(), x.shape());
        let (lo, hi) = y.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    struct ZeroOut;
    impl Preprocessor for ZeroOut {
        fn key(&self) -> &str {
            "zero"
        }
        fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn reconstruction_mse_of_stubs() {
        let x = Tensor::from_fn(&[5, 1, 4, 4], |i| 0.5 + 0.3 * ((i as f64) * 1.3).sin());
        assert_eq!(reconstruction_mse(&Identity, &x, 2).unwrap(), 0.0);
        // E[x²] = mean² + variance, by direct summation
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let got = reconstruction_mse(&ZeroOut, &x, 3).unwrap();
        assert!((got - (mean * mean + var)).abs() < 1e-12);
    }

    #[test]
    fn single_pass_stream_never_exceeds_dataset() {
        let x = Tensor::zeros(&[1000, 1, 2, 2]);
        let total: usize = SampleStream::new(&x, 64, true, 0).map(|b| b.count()).sum();
        assert_eq!(total, 1000);
    }

    fn tiny_ae() -> AutoencoderModel {
        let mut spec = builtin_zoo()["segnet-desk"].clone();
        spec.input_shape = [3, 8, 8];
        spec.stage_widths = vec![8, 8];
        spec.pool_stages = 2;
        build_autoencoder(&spec, 3).unwrap()
    }

    #[test]
    fn pretraining_is_deterministic_and_logs_monotone_samples() {
        let data = crate::data::SyntheticShapes::new(5, 8).generate(0, 64).images;
        let cfg = PretrainConfig {
            check_interval: 32,
            max_samples: 256,
            batch_size: 8,
            single_pass: false,
            ..Default::default()
        };
        let (a, log_a) = pretrain(tiny_ae(), SampleStream::new(&data, 8, false, 1), &cfg, Some(&data)).unwrap();
        let (b, _) = pretrain(tiny_ae(), SampleStream::new(&data, 8, false, 1), &cfg, None).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(log_a.samples_seen, 256);
        assert!(log_a.checks.windows(2).all(|w| w[0].samples_seen < w[1].samples_seen));
        assert!(log_a.checks.iter().all(|c| c.val_loss.is_some()));
        let k = (log_a.checks.last().unwrap().lr / cfg.initial_lr).ln() / cfg.decay_factor.ln();
        assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn single_pass_logs_at_most_dataset_size() {
        let data = crate::data::SyntheticShapes::new(5, 8).generate(0, 100).images;
        let cfg = PretrainConfig {
            check_interval: 30,
            max_samples: 10_000,
            batch_size: 16,
            single_pass: true,
            ..Default::default()
        };
        let (_, log) = pretrain(tiny_ae(), SampleStream::new(&data, 16, true, 1), &cfg, None).unwrap();
        assert_eq!(log.samples_seen, 100);
        assert_eq!(log.steps, 7);
        assert!(log.checks.iter().all(|c| c.samples_seen <= 100));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let good = crate::data::SyntheticShapes::new(5, 8).generate(0, 16).images;
        let mut bad = good.slice_items(0, 8);
        bad.data_mut()[5] = f64::NAN;
        let stream = vec![good.slice_items(0, 8), bad];
        let cfg = PretrainConfig { check_interval: 8, max_samples: 64, batch_size: 8, ..Default::default() };
        match pretrain(tiny_ae(), stream, &cfg, None) {
            Err(Error::NonFiniteLoss { lr, samples_seen }) => {
                assert_eq!(samples_seen, 8);
                assert_eq!(lr, cfg.initial_lr);
            }
            other => panic!("expected non-finite loss, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainingLog {
            checks: vec![
                CheckRecord { samples_seen: 10, loss: 0.5, lr: 0.01, val_loss: None },
                CheckRecord { samples_seen: 20, loss: 0.25, lr: 0.002, val_loss: Some(0.3) },
            ],
            steps: 2,
            samples_seen: 20,
        };
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        let back = TrainingLog::read_csv(&p).unwrap();
        assert_eq!(back.checks, log.checks);
    }
}
