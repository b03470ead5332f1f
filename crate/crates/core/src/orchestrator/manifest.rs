//! Experiment manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetSource};
use crate::error::{Error, Result};
use crate::evaluate::{RrcConvention, DEFAULT_NOISE_GRID};
use crate::finetune::FinetuneConfig;
use crate::modelzoo::{builtin_zoo, parse_zoo, ArchitectureSpec, Family};
use crate::pretrain::{ClassifierTrainConfig, PretrainConfig};

/// A contiguous index range of one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub dataset: String,
    pub offset: usize,
    pub count: usize,
}

impl SplitSpec {
    pub fn overlaps(&self, other: &SplitSpec) -> bool {
        self.dataset == other.dataset && self.offset < other.offset + other.count && other.offset < self.offset + self.count
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub pretrain: SplitSpec,
    pub classifier_train: SplitSpec,
    /// Defaults to the classifier training split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<SplitSpec>,
    pub evaluation: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub autoencoder: String,
    pub classifiers: Vec<String>,
    /// Architecture file replacing the built-in zoo.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoo: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub top_k: usize,
    pub batch_size: usize,
    pub noise_strengths: Vec<f64>,
    pub noise_seeds: Vec<u64>,
    pub fca_thresholds: Vec<f64>,
    pub nmi_bins: usize,
    pub lab_bins: usize,
    /// Evaluation images used for the LAB histograms.
    pub lab_samples: usize,
    pub rrc_convention: RrcConvention,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            batch_size: 64,
            noise_strengths: DEFAULT_NOISE_GRID.to_vec(),
            noise_seeds: vec![1],
            fca_thresholds: vec![0.1, 0.2, 0.8, 0.9],
            nmi_bins: 64,
            lab_bins: 32,
            lab_samples: 64,
            rrc_convention: RrcConvention::Diagonal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub seed: u64,
    pub datasets: BTreeMap<String, DatasetSource>,
    pub splits: Splits,
    pub models: Models,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub classifier_training: ClassifierTrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Complete per-classifier replacements of `finetune`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub finetune_overrides: BTreeMap<String, FinetuneConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

/// Parses and validates a manifest, reporting every violation at once.
pub fn validate_manifest(text: &str) -> Result<ExperimentManifest> {
    let m: ExperimentManifest = toml::from_str(text).map_err(|e| Error::Manifest(vec![e.to_string()]))?;
    m.validate()?;
    Ok(m)
}

/// Reads a manifest file. A relative zoo path is taken relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<ExperimentManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut m: ExperimentManifest = toml::from_str(&text).map_err(|e| Error::Manifest(vec![e.to_string()]))?;
    if let (Some(zoo), Some(dir)) = (&m.models.zoo, path.parent()) {
        if zoo.is_relative() {
            m.models.zoo = Some(dir.join(zoo));
        }
    }
    rebase_dataset_paths(&mut m, path.parent());
    m.validate()?;
    Ok(m)
}

fn rebase_dataset_paths(m: &mut ExperimentManifest, dir: Option<&Path>) {
    let Some(dir) = dir else { return };
    for src in m.datasets.values_mut() {
        if let DatasetSource::Cifar10Bin { files } = src {
            for f in files.iter_mut().filter(|f| f.is_relative()) {
                *f = dir.join(&*f);
            }
        }
    }
}

impl ExperimentManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format { what: "manifest", detail: e.to_string() })
    }

    pub fn zoo(&self) -> Result<BTreeMap<String, ArchitectureSpec>> {
        match &self.models.zoo {
            None => Ok(builtin_zoo()),
            Some(p) => parse_zoo(&std::fs::read_to_string(p)?),
        }
    }

    pub fn finetune_split(&self) -> &SplitSpec {
        self.splits.finetune.as_ref().unwrap_or(&self.splits.classifier_train)
    }

    pub fn finetune_config(&self, classifier: &str) -> FinetuneConfig {
        self.finetune_overrides.get(classifier).cloned().unwrap_or_else(|| self.finetune.clone())
    }

    pub fn load_split(&self, split: &SplitSpec) -> Result<Dataset> {
        let src = self
            .datasets
            .get(&split.dataset)
            .ok_or_else(|| Error::UnknownSpec(format!("dataset {}", split.dataset)))?;
        src.load(split.offset, split.count)
    }

    /// Hex SHA-256 of the canonical manifest plus the architecture specs it
    /// uses.
    pub fn digest(&self) -> Result<String> {
        let zoo = self.zoo()?;
        let used: BTreeMap<&String, &ArchitectureSpec> = zoo
            .iter()
            .filter(|(k, _)| **k == self.models.autoencoder || self.models.classifiers.contains(k))
            .collect();
        let mut canon = self.clone();
        canon.models.zoo = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canon)?);
        h.update(serde_json::to_vec(&used)?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.seed == 0 {
            v.push("seed must be positive".to_owned());
        }
        if self.evaluation.noise_seeds.is_empty() {
            v.push("evaluation.noise_seeds must not be empty".to_owned());
        }
        for s in &self.evaluation.noise_seeds {
            if *s == 0 {
                v.push("evaluation.noise_seeds must be positive".to_owned());
            }
        }
        for (name, d) in &self.datasets {
            if let DatasetSource::Synthetic { sensor_noise, .. } = d {
                if !(0.0..=0.5).contains(sensor_noise) {
                    v.push(format!("dataset {name}: sensor_noise must lie in [0, 0.5]"));
                }
            }
        }
        let splits = [
            ("pretrain", &self.splits.pretrain),
            ("classifier_train", &self.splits.classifier_train),
            ("finetune", self.finetune_split()),
            ("evaluation", &self.splits.evaluation),
        ];
        for (name, s) in splits {
            if !self.datasets.contains_key(&s.dataset) {
                v.push(format!("split {name} refers to unknown dataset {}", s.dataset));
            }
            if s.count == 0 {
                v.push(format!("split {name} is empty"));
            }
        }
        for (name, s) in &splits[..3] {
            if s.overlaps(&self.splits.evaluation) {
                v.push(format!("{name} split overlaps the evaluation split"));
            }
        }
        match self.zoo() {
            Err(e) => v.push(format!("zoo: {e}")),
            Ok(zoo) => self.check_models(&zoo, &mut v),
        }
        let ev = &self.evaluation;
        if ev.top_k == 0 || ev.batch_size == 0 || ev.nmi_bins == 0 || ev.lab_bins == 0 {
            v.push("evaluation.top_k, batch_size, nmi_bins and lab_bins must be positive".to_owned());
        }
        if ev.noise_strengths.is_empty()
            || ev.noise_strengths.windows(2).any(|w| w[0] >= w[1])
            || ev.noise_strengths.iter().any(|s| !(0.0..=1.0).contains(s))
        {
            v.push("evaluation.noise_strengths must be strictly ascending within [0, 1]".to_owned());
        }
        if ev.fca_thresholds.is_empty() || ev.fca_thresholds.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            v.push("evaluation.fca_thresholds must be non-empty and non-negative".to_owned());
        }
        if let Err(Error::Manifest(errs)) = self.pretrain.validate() {
            v.extend(errs.into_iter().map(|e| format!("pretrain: {e}")));
        }
        if self.classifier_training.batch_size == 0 {
            v.push("classifier_training.batch_size must be positive".to_owned());
        }
        for (id, cfg) in std::iter::once(("default", &self.finetune)).chain(self.finetune_overrides.iter().map(|(k, c)| (k.as_str(), c))) {
            if cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
                v.push(format!("finetune {id}: batch_size must be positive and lr non-negative"));
            }
        }
        for id in self.finetune_overrides.keys() {
            if !self.models.classifiers.contains(id) {
                v.push(format!("finetune override for unlisted classifier {id}"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(v))
        }
    }

    fn check_models(&self, zoo: &BTreeMap<String, ArchitectureSpec>, v: &mut Vec<String>) {
        let shapes: BTreeSet<[usize; 3]> = self.datasets.values().map(DatasetSource::image_shape).collect();
        match zoo.get(&self.models.autoencoder) {
            None => v.push(format!("unknown autoencoder spec {}", self.models.autoencoder)),
            Some(s) if s.family != Family::AeSegnet => v.push(format!("{} is not an autoencoder", s.name)),
            Some(s) if !shapes.contains(&s.input_shape) => v.push(format!("{} input shape fits no dataset", s.name)),
            Some(_) => {}
        }
        if self.models.classifiers.is_empty() {
            v.push("at least one classifier is required".to_owned());
        }
        let mut seen = BTreeSet::new();
        for id in &self.models.classifiers {
            if !seen.insert(id) {
                v.push(format!("classifier {id} listed twice"));
            }
            match zoo.get(id) {
                None => v.push(format!("unknown classifier spec {id}")),
                Some(s) if !s.family.is_classifier() => v.push(format!("{id} is not a classifier")),
                Some(s) if self.datasets.values().any(|d| d.class_count() != s.class_count) => {
                    v.push(format!("{id} predicts {} classes, datasets have 10", s.class_count))
                }
                Some(_) => {}
            }
        }
    }
}
