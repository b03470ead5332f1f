//! Classifier-coupled fine-tuning.
//!
//! Reconstructions are fed into a frozen classifier; the classification loss
//! is backpropagated through the classifier into the autoencoder and only the
//! configured autoencoder partition is updated. Batch norm runs in inference
//! mode on both sides, so no running statistics move either.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::top_k_accuracy;
use crate::modelzoo::{AutoencoderModel, ClassifierModel};
use crate::nn::{loss, Grads, Mode, SgdMomentum};
use crate::tensor::{ImageBatch, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateTarget {
    Encoder,
    #[default]
    Decoder,
    Both,
}

impl UpdateTarget {
    pub const ALL: [UpdateTarget; 3] = [UpdateTarget::Encoder, UpdateTarget::Decoder, UpdateTarget::Both];

    pub fn encoder(self) -> bool {
        matches!(self, UpdateTarget::Encoder | UpdateTarget::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, UpdateTarget::Decoder | UpdateTarget::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateTarget::Encoder => "encoder",
            UpdateTarget::Decoder => "decoder",
            UpdateTarget::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneLoss {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub update_target: UpdateTarget,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Stops after this many optimisation steps, if set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub loss: FinetuneLoss,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            update_target: UpdateTarget::Decoder,
            lr: 0.001,
            momentum: 0.9,
            epochs: 1,
            max_steps: None,
            batch_size: 32,
            loss: FinetuneLoss::CrossEntropy,
            seed: 1,
        }
    }
}

/// An autoencoder feeding a frozen classifier.
pub struct CoupledModel<'c> {
    pub ae: AutoencoderModel,
    classifier: &'c ClassifierModel,
    classifier_checksum_at_attach: String,
}

/// Loss and autoencoder gradients of one coupled pass.
pub struct CoupledGrads {
    pub loss: f64,
    pub logits: Tensor,
    pub encoder: Grads,
    pub decoder: Grads,
}

impl<'c> CoupledModel<'c> {
    pub fn attach(ae: AutoencoderModel, classifier: &'c ClassifierModel) -> Result<Self> {
        if !classifier.frozen {
            return Err(Error::contract(format!(
                "classifier {} must be frozen before coupling",
                classifier.spec.name
            )));
        }
        if ae.spec.input_shape != classifier.spec.input_shape {
            return Err(Error::contract(format!(
                "autoencoder output {:?} does not fit classifier input {:?}",
                ae.spec.input_shape, classifier.spec.input_shape
            )));
        }
        Ok(Self {
            ae,
            classifier,
            classifier_checksum_at_attach: classifier.checksum(),
        })
    }

    pub fn classifier(&self) -> &ClassifierModel {
        self.classifier
    }

    pub fn classifier_checksum_at_attach(&self) -> &str {
        &self.classifier_checksum_at_attach
    }

    /// `classifier(reconstruct(x))`.
    pub fn coupled_forward(&self, x: &ImageBatch) -> Result<Tensor> {
        let r = self.ae.reconstruct(x)?;
        self.classifier.forward(&r)
    }

    /// Cross-entropy of the coupled forward pass and its gradient w.r.t. the
    /// requested autoencoder partitions. Pooling indices come from this very
    /// encoder pass.
    pub fn loss_and_grads(&self, x: &ImageBatch, labels: &[usize], target: UpdateTarget) -> Result<CoupledGrads> {
        let (r, ae_tape, _) = self.ae.forward_tape(x, Mode::Eval)?;
        let (logits, c_tape, _) = self.classifier.forward_tape(&r, Mode::Eval)?;
        let (l, dlogits) = loss::cross_entropy(&logits, labels)?;
        let (dr, _) = self.classifier.backward(c_tape, dlogits, false)?;
        let (encoder, decoder, _) = self.ae.backward(ae_tape, dr, target.encoder(), target.decoder())?;
        Ok(CoupledGrads {
            loss: l,
            logits,
            encoder,
            decoder,
        })
    }

    /// Fails hard if the classifier's parameters moved since attachment.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.classifier.checksum();
        if now != self.classifier_checksum_at_attach {
            return Err(Error::breach(
                "finetune",
                format!(
                    "classifier {} changed: {} -> {}",
                    self.classifier.spec.name, self.classifier_checksum_at_attach, now
                ),
            ));
        }
        Ok(())
    }

    pub fn into_autoencoder(self) -> AutoencoderModel {
        self.ae
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
    pub decoder_checksum_before: String,
    pub decoder_checksum_after: String,
    pub classifier_checksum: String,
}

/// Fine-tunes the coupled autoencoder on labelled data. The returned model is
/// labelled `A_<classifier id>`.
pub fn finetune(cm: CoupledModel<'_>, data: &Dataset, config: &FinetuneConfig) -> Result<(AutoencoderModel, FinetuneLog)> {
    if data.is_empty() {
        return Err(Error::contract("empty fine-tuning set"));
    }
    cm.verify_frozen()?;
    let mut cm = cm;
    let mut log = FinetuneLog {
        encoder_checksum_before: cm.ae.encoder_checksum(),
        decoder_checksum_before: cm.ae.decoder_checksum(),
        classifier_checksum: cm.classifier_checksum_at_attach.clone(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = SgdMomentum::new(config.lr, config.momentum);
    let target = config.update_target;
    'outer: for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (x, labels) in data.shuffled_batches(config.batch_size, &mut rng) {
            if config.max_steps.is_some_and(|m| log.steps >= m) {
                if seen > 0 {
                    log.epoch_losses.push(sum / seen as f64);
                }
                break 'outer;
            }
            let g = cm.loss_and_grads(&x, &labels, target)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFiniteLoss { samples_seen: log.steps, lr: opt.lr });
            }
            if target.encoder() {
                opt.step(&mut cm.ae.encoder, &g.encoder)?;
            }
            if target.decoder() {
                opt.step(&mut cm.ae.decoder, &g.decoder)?;
            }
            sum += g.loss * labels.len() as f64;
            seen += labels.len();
            log.steps += 1;
        }
        info!("finetune {} epoch {epoch}: loss {:.4}", cm.classifier.spec.name, sum / seen.max(1) as f64);
        log.epoch_losses.push(sum / seen.max(1) as f64);
        cm.verify_frozen()?;
    }
    cm.verify_frozen()?;
    log.encoder_checksum_after = cm.ae.encoder_checksum();
    log.decoder_checksum_after = cm.ae.decoder_checksum();
    if !target.encoder() && log.encoder_checksum_after != log.encoder_checksum_before {
        return Err(Error::breach("finetune", "encoder changed while not targeted"));
    }
    if !target.decoder() && log.decoder_checksum_after != log.decoder_checksum_before {
        return Err(Error::breach("finetune", "decoder changed while not targeted"));
    }
    let name = cm.classifier.spec.name.clone();
    let mut ae = cm.into_autoencoder();
    ae.label = format!("A_{name}");
    Ok((ae, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target: UpdateTarget,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub top1: f64,
}

/// Fine-tunes three copies of the same pre-trained autoencoder with the same
/// seed, one per update target, and reports validation top-1 of each.
pub fn ablate_update_target(
    ae: &AutoencoderModel,
    classifier: &ClassifierModel,
    train: &Dataset,
    validation: &Dataset,
    config: &FinetuneConfig,
) -> Result<Vec<AblationRow>> {
    UpdateTarget::ALL
        .iter()
        .map(|&target| {
            let initial_checksum = ae.checksum();
            let cfg = FinetuneConfig { update_target: target, ..config.clone() };
            let cm = CoupledModel::attach(ae.clone(), classifier)?;
            let (tuned, _) = finetune(cm, train, &cfg)?;
            let top1 = top_k_accuracy(classifier, validation, &tuned, 1, 64)?;
            Ok(AblationRow {
                target,
                initial_checksum,
                final_checksum: tuned.checksum(),
                top1,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{build_autoencoder, build_classifier, builtin_zoo, ArchitectureSpec, Family};
    use rand::Rng;

    fn mini_specs() -> (ArchitectureSpec, ArchitectureSpec) {
        let ae = ArchitectureSpec {
            name: "mini-ae".into(),
            family: Family::AeSegnet,
            input_shape: [2, 4, 4],
            class_count: 0,
            stage_widths: vec![3, 4],
            pool_stages: 2,
            batch_norm: true,
            dense_width: 8,
        };
        let cls = ArchitectureSpec {
            name: "mini-cls".into(),
            family: Family::Residual,
            input_shape: [2, 4, 4],
            class_count: 3,
            stage_widths: vec![3, 4],
            pool_stages: 1,
            batch_norm: true,
            dense_width: 8,
        };
        (ae, cls)
    }

    #[test]
    fn identity_ae_passes_raw_logits() {
        let zoo = builtin_zoo();
        let mut cls = build_classifier(&zoo["vgg"], 2).unwrap();
        cls.freeze();
        let cm = CoupledModel::attach(AutoencoderModel::identity(3, 32, 32), &cls).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[5, 3, 32, 32], |_| rng.random::<f64>());
        let logits = cm.coupled_forward(&x).unwrap();
        assert_eq!(logits, cls.forward(&x).unwrap());
        assert_eq!(logits.shape(), &[5, 10]);
    }

    #[test]
    fn unfrozen_or_mismatched_classifier_is_refused() {
        let zoo = builtin_zoo();
        let cls = build_classifier(&zoo["lenet"], 2).unwrap();
        assert!(CoupledModel::attach(AutoencoderModel::identity(3, 32, 32), &cls).is_err());
        let mut cls = cls;
        cls.freeze();
        assert!(CoupledModel::attach(AutoencoderModel::identity(3, 16, 16), &cls).is_err());
    }

    #[test]
    fn zero_lr_leaves_autoencoder_bit_identical() {
        let (ae_spec, cls_spec) = mini_specs();
        let ae = build_autoencoder(&ae_spec, 1).unwrap();
        let mut cls = build_classifier(&cls_spec, 2).unwrap();
        cls.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Dataset::new(
            Tensor::from_fn(&[12, 2, 4, 4], |_| rng.random::<f64>()),
            (0..12).map(|i| i % 3).collect(),
            3,
        )
        .unwrap();
        let before = ae.checksum();
        let cfg = FinetuneConfig { lr: 0.0, update_target: UpdateTarget::Both, epochs: 2, batch_size: 4, ..Default::default() };
        let (tuned, log) = finetune(CoupledModel::attach(ae, &cls).unwrap(), &data, &cfg).unwrap();
        assert_eq!(tuned.checksum(), before);
        assert_eq!(log.steps, 6);
    }

    #[test]
    fn decoder_target_keeps_encoder_and_classifier_bytes() {
        let (ae_spec, cls_spec) = mini_specs();
        let ae = build_autoencoder(&ae_spec, 1).unwrap();
        let mut cls = build_classifier(&cls_spec, 2).unwrap();
        cls.freeze();
        let cls_before = cls.checksum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Dataset::new(
            Tensor::from_fn(&[16, 2, 4, 4], |_| rng.random::<f64>()),
            (0..16).map(|i| i % 3).collect(),
            3,
        )
        .unwrap();
        let enc_before = ae.encoder_checksum();
        let dec_before = ae.decoder_checksum();
        let cfg = FinetuneConfig { lr: 0.05, epochs: 3, batch_size: 4, ..Default::default() };
        let (tuned, log) = finetune(CoupledModel::attach(ae, &cls).unwrap(), &data, &cfg).unwrap();
        assert_eq!(tuned.encoder_checksum(), enc_before);
        assert_ne!(tuned.decoder_checksum(), dec_before);
        assert_eq!(cls.checksum(), cls_before);
        assert_eq!(log.classifier_checksum, cls_before);
        assert_eq!(tuned.label, "A_mini-cls");
    }

    #[test]
    fn max_steps_caps_updates() {
        let (ae_spec, cls_spec) = mini_specs();
        let ae = build_autoencoder(&ae_spec, 1).unwrap();
        let mut cls = build_classifier(&cls_spec, 2).unwrap();
        cls.freeze();
        let data = Dataset::new(Tensor::full(&[40, 2, 4, 4], 0.5), vec![0; 40], 3).unwrap();
        let cfg = FinetuneConfig { epochs: 10, max_steps: Some(7), batch_size: 4, ..Default::default() };
        let (_, log) = finetune(CoupledModel::attach(ae, &cls).unwrap(), &data, &cfg).unwrap();
        assert_eq!(log.steps, 7);
    }

    #[test]
    fn ablation_reports_three_rows_from_one_checkpoint() {
        let (ae_spec, cls_spec) = mini_specs();
        let ae = build_autoencoder(&ae_spec, 1).unwrap();
        let mut cls = build_classifier(&cls_spec, 2).unwrap();
        cls.freeze();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Dataset::new(
            Tensor::from_fn(&[8, 2, 4, 4], |_| rng.random::<f64>()),
            (0..8).map(|i| i % 3).collect(),
            3,
        )
        .unwrap();
        let rows = ablate_update_target(&ae, &cls, &data, &data, &FinetuneConfig { batch_size: 4, ..Default::default() }).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.initial_checksum == ae.checksum()));
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.top1)));
    }
}
