//! Stage sequencing, persistence and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::ExperimentManifest;
use super::{report, write_atomic};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluate::{self, cross_matrix, finetuned_key, noise_sweep, rrc, sort_rrc, NoiseSweep, RrcMatrix};
use crate::fca::{concept_lattice, export_dot, is_total_order, threshold_bands, threshold_context};
use crate::finetune::{finetune, CoupledModel, FinetuneConfig};
use crate::infometrics::{inter_nmi, intra_nmi, lab_channel_histograms, NmiReport};
use crate::modelzoo::{
    build_autoencoder, build_classifier, load_autoencoder, load_classifier, save_autoencoder, save_classifier,
    ArchitectureSpec, AutoencoderModel, Classifier, ClassifierModel, Identity, Preprocessor,
};
use crate::pretrain::{pretrain, train_classifier, ClassifierTrainConfig, PretrainConfig, SampleStream};

pub const SUBDIRS: [&str; 5] = ["checkpoints", "tables", "figures", "lattices", "logs"];
pub const RUN_RECORD: &str = "run.json";
pub const DEVICE_VAR: &str = "SIGPROBE_DEVICE";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    TrainClassifier(String),
    Finetune(String),
    Evaluate,
    NoiseSweep,
    Fca,
    Nmi,
    Report,
}

impl Stage {
    pub fn name(&self) -> String {
        match self {
            Stage::Pretrain => "pretrain".into(),
            Stage::TrainClassifier(id) => format!("train-classifier/{id}"),
            Stage::Finetune(id) => format!("finetune/{id}"),
            Stage::Evaluate => "evaluate".into(),
            Stage::NoiseSweep => "noise-sweep".into(),
            Stage::Fca => "fca".into(),
            Stage::Nmi => "nmi".into(),
            Stage::Report => "report".into(),
        }
    }
}

/// Every stage of a full run, in execution order.
pub fn declared_stages(m: &ExperimentManifest) -> Vec<Stage> {
    let mut s = vec![Stage::Pretrain];
    s.extend(m.models.classifiers.iter().cloned().map(Stage::TrainClassifier));
    s.extend(m.models.classifiers.iter().cloned().map(Stage::Finetune));
    s.extend([Stage::Evaluate, Stage::NoiseSweep, Stage::Fca, Stage::Nmi, Stage::Report]);
    s
}

/// Substream seed of a stage: the first eight bytes of
/// SHA-256(global seed, stage name).
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Resumed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub seed: u64,
    pub wall_seconds: f64,
    pub training_steps: u64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub crate_version: String,
    pub device: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Result<Self> {
        Ok(Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            device: device()?,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        })
    }
}

/// Compute device from the environment. Only the CPU is supported.
pub fn device() -> Result<String> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok("cpu".into()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok("cpu".into()),
        Ok(v) => Err(Error::Manifest(vec![format!("{DEVICE_VAR}={v}: only cpu is available")])),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest_name: String,
    pub manifest_digest: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub environment: Environment,
}

impl RunRecord {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn training_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.training_steps).sum()
    }

    fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(s) => *s = rec,
            None => self.stages.push(rec),
        }
    }
}

struct StageOutput {
    steps: u64,
    artifacts: Vec<PathBuf>,
}

/// A run directory bound to one manifest.
pub struct Pipeline {
    pub manifest: ExperimentManifest,
    pub zoo: BTreeMap<String, ArchitectureSpec>,
    pub run_dir: PathBuf,
    pub record: RunRecord,
}

pub fn run_dir_for(out_root: &Path, digest: &str) -> PathBuf {
    out_root.join("runs").join(&digest[..16])
}

pub fn ae_path(label: &str) -> PathBuf {
    PathBuf::from(format!("checkpoints/ae_{}.ckpt", label.trim_start_matches("A_")))
}

pub fn classifier_path(id: &str) -> PathBuf {
    PathBuf::from(format!("checkpoints/classifier_{id}.ckpt"))
}

impl Pipeline {
    pub fn open(manifest: ExperimentManifest, out_root: &Path) -> Result<Self> {
        manifest.validate()?;
        let digest = manifest.digest()?;
        let zoo = manifest.zoo()?;
        let run_dir = run_dir_for(out_root, &digest);
        for d in SUBDIRS {
            std::fs::create_dir_all(run_dir.join(d))?;
        }
        write_atomic(&run_dir.join("manifest.toml"), manifest.to_toml()?.as_bytes())?;
        let fresh = RunRecord {
            manifest_name: manifest.name.clone(),
            manifest_digest: digest.clone(),
            seed: manifest.seed,
            stages: Vec::new(),
            environment: Environment::current()?,
        };
        let record = match std::fs::read(run_dir.join(RUN_RECORD)) {
            Ok(bytes) => match serde_json::from_slice::<RunRecord>(&bytes) {
                Ok(r) if r.manifest_digest == digest => RunRecord { environment: fresh.environment.clone(), ..r },
                _ => fresh,
            },
            Err(_) => fresh,
        };
        Ok(Self { manifest, zoo, run_dir, record })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.run_dir.join(rel)
    }

    /// True when the stage is recorded and all its artifacts still hash to
    /// the recorded values.
    pub fn is_complete(&self, stage: &Stage) -> bool {
        self.record.stage(&stage.name()).is_some_and(|r| {
            r.artifacts
                .iter()
                .all(|a| file_sha256(&self.path(&a.path)).is_ok_and(|h| h == a.sha256))
        })
    }

    fn save_record(&self) -> Result<()> {
        write_atomic(&self.path(RUN_RECORD), &serde_json::to_vec_pretty(&self.record)?)
    }

    /// Runs one stage, or verifies and skips it under `resume`.
    pub fn run_stage(&mut self, stage: &Stage, resume: bool) -> Result<&StageRecord> {
        let name = stage.name();
        let seed = stage_seed(self.manifest.seed, &name);
        if resume && self.is_complete(stage) {
            info!("{name}: verified, skipping");
            let prev = self.record.stage(&name).cloned().expect("checked above");
            self.record.upsert(StageRecord {
                status: StageStatus::Resumed,
                training_steps: 0,
                wall_seconds: 0.0,
                ..prev
            });
        } else {
            info!("{name}: running");
            let t = Instant::now();
            let out = self.execute(stage, seed)?;
            let artifacts = out
                .artifacts
                .into_iter()
                .map(|p| Ok(Artifact { sha256: file_sha256(&self.path(&p))?, path: p }))
                .collect::<Result<Vec<_>>>()?;
            self.record.upsert(StageRecord {
                name: name.clone(),
                status: StageStatus::Completed,
                seed,
                wall_seconds: t.elapsed().as_secs_f64(),
                training_steps: out.steps,
                artifacts,
            });
        }
        self.save_record()?;
        Ok(self.record.stage(&name).expect("just recorded"))
    }

    /// Runs `stages` in order. Once one stage executes, every later one
    /// executes too.
    pub fn run_stages(&mut self, stages: &[Stage], resume: bool) -> Result<RunRecord> {
        let mut resume = resume;
        for s in stages {
            let rec = self.run_stage(s, resume)?;
            if rec.status == StageStatus::Completed {
                resume = false;
            }
        }
        Ok(self.record.clone())
    }

    fn require(&self, stage: &str, rel: &Path) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { stage: stage.into(), path: p })
        }
    }

    pub fn load_autoencoder(&self, label: &str) -> Result<AutoencoderModel> {
        let stage = if label == "A_S" { "pretrain".to_owned() } else { format!("finetune/{}", label.trim_start_matches("A_")) };
        load_autoencoder(&self.require(&stage, &ae_path(label))?)
    }

    pub fn load_classifier(&self, id: &str) -> Result<ClassifierModel> {
        let mut c = load_classifier(&self.require(&format!("train-classifier/{id}"), &classifier_path(id))?)?;
        c.freeze();
        Ok(c)
    }

    fn all_models(&self) -> Result<(Vec<ClassifierModel>, Vec<AutoencoderModel>)> {
        let ids = &self.manifest.models.classifiers;
        let classifiers = ids.iter().map(|id| self.load_classifier(id)).collect::<Result<Vec<_>>>()?;
        let mut aes = vec![self.load_autoencoder("A_S")?];
        for id in ids {
            aes.push(self.load_autoencoder(&finetuned_key(id))?);
        }
        Ok((classifiers, aes))
    }

    fn eval_split(&self) -> Result<Dataset> {
        self.manifest.load_split(&self.manifest.splits.evaluation)
    }

    fn execute(&mut self, stage: &Stage, seed: u64) -> Result<StageOutput> {
        match stage {
            Stage::Pretrain => self.stage_pretrain(seed),
            Stage::TrainClassifier(id) => self.stage_train_classifier(id, seed),
            Stage::Finetune(id) => self.stage_finetune(id, seed),
            Stage::Evaluate => self.stage_evaluate(),
            Stage::NoiseSweep => self.stage_noise_sweep(),
            Stage::Fca => self.stage_fca(),
            Stage::Nmi => self.stage_nmi(),
            Stage::Report => Ok(StageOutput { steps: 0, artifacts: report::emit_report(&self.run_dir, &self.manifest)? }),
        }
    }

    fn stage_pretrain(&self, seed: u64) -> Result<StageOutput> {
        let m = &self.manifest;
        let data = m.load_split(&m.splits.pretrain)?;
        let ae = build_autoencoder(&self.zoo[&m.models.autoencoder], seed)?;
        let cfg = PretrainConfig { seed, ..m.pretrain.clone() };
        let stream = SampleStream::new(&data.images, cfg.batch_size, cfg.single_pass, seed);
        let (ae, log) = pretrain(ae, stream, &cfg, None)?;
        let (ckpt, log_path) = (ae_path("A_S"), PathBuf::from("logs/pretrain.csv"));
        save_autoencoder(&ae, &self.path(&ckpt))?;
        log.write_csv(&self.path(&log_path))?;
        Ok(StageOutput { steps: log.steps, artifacts: vec![ckpt, log_path] })
    }

    fn stage_train_classifier(&self, id: &str, seed: u64) -> Result<StageOutput> {
        let m = &self.manifest;
        let data = m.load_split(&m.splits.classifier_train)?;
        let mut model = build_classifier(&self.zoo[id], seed)?;
        let cfg = ClassifierTrainConfig { seed, ..m.classifier_training.clone() };
        let epochs = train_classifier(&mut model, &data, &cfg)?;
        model.freeze();
        let ckpt = classifier_path(id);
        save_classifier(&model, &self.path(&ckpt))?;
        let log_path = PathBuf::from(format!("logs/train_{id}.csv"));
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &epochs {
            w.serialize(e)?;
        }
        write_atomic(&self.path(&log_path), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;
        let steps = (epochs.len() * data.len().div_ceil(cfg.batch_size)) as u64;
        Ok(StageOutput { steps, artifacts: vec![ckpt, log_path] })
    }

    fn stage_finetune(&self, id: &str, seed: u64) -> Result<StageOutput> {
        let m = &self.manifest;
        let data = m.load_split(m.finetune_split())?;
        let ae = self.load_autoencoder("A_S")?;
        let classifier = self.load_classifier(id)?;
        let before = classifier.checksum();
        let cfg = FinetuneConfig { seed, ..m.finetune_config(id) };
        let (tuned, log) = finetune(CoupledModel::attach(ae, &classifier)?, &data, &cfg)?;
        if classifier.checksum() != before {
            return Err(Error::breach(format!("finetune/{id}"), "classifier checksum drift"));
        }
        let ckpt = ae_path(&tuned.label);
        save_autoencoder(&tuned, &self.path(&ckpt))?;
        let log_path = PathBuf::from(format!("logs/finetune_{id}.json"));
        write_atomic(&self.path(&log_path), &serde_json::to_vec_pretty(&log)?)?;
        Ok(StageOutput { steps: log.steps, artifacts: vec![ckpt, log_path] })
    }

    fn stage_evaluate(&self) -> Result<StageOutput> {
        let ev = &self.manifest.evaluation;
        let data = self.eval_split()?;
        let (classifiers, aes) = self.all_models()?;
        let mut pre: Vec<&dyn Preprocessor> = vec![&Identity];
        pre.extend(aes.iter().map(|a| a as &dyn Preprocessor));
        let cls: Vec<&dyn Classifier> = classifiers.iter().map(|c| c as &dyn Classifier).collect();
        let matrix = cross_matrix(&pre, &cls, &data, ev.top_k, ev.batch_size)?;
        let top1 = PathBuf::from("tables/accuracy_top1.csv");
        let topk = PathBuf::from(format!("tables/accuracy_top{}.csv", ev.top_k));
        matrix.write_csv(&self.path(&top1))?;
        matrix.write_topk_csv(&self.path(&topk))?;

        let summary = PathBuf::from("tables/top1_summary.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["classifier", "standalone", "A_S", "A_i", "diff_S", "diff_i"])?;
        for c in &matrix.cols {
            let base = matrix.get("identity", c).unwrap_or(f64::NAN);
            let s = matrix.get("A_S", c).unwrap_or(f64::NAN);
            let i = matrix.get(&finetuned_key(c), c).unwrap_or(f64::NAN);
            w.write_record([c.clone(), base.to_string(), s.to_string(), i.to_string(), (s - base).to_string(), (i - base).to_string()])?;
        }
        write_atomic(&self.path(&summary), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;

        let r = rrc(&matrix, ev.rrc_convention)?;
        let rrc_path = PathBuf::from("tables/rrc.csv");
        r.write_csv(&self.path(&rrc_path))?;
        let sorted_path = PathBuf::from("tables/rrc_sorted.csv");
        let mut buf = Vec::new();
        evaluate::write_sorted_rrc(&sort_rrc(&r), &mut buf)?;
        write_atomic(&self.path(&sorted_path), &buf)?;

        let lab_path = PathBuf::from("tables/lab_histograms.csv");
        let sample = data.images.slice_items(0, ev.lab_samples.min(data.len()));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["source", "channel", "bin", "lo", "hi", "count"])?;
        for p in &pre {
            let h = lab_channel_histograms(&p.apply(&sample)?, ev.lab_bins)?;
            for ch in 0..3 {
                for b in 0..h.bins {
                    w.write_record([
                        p.key().to_owned(),
                        crate::infometrics::LAB_CHANNELS[ch].to_owned(),
                        b.to_string(),
                        h.edges[ch][b].to_string(),
                        h.edges[ch][b + 1].to_string(),
                        h.counts[ch][b].to_string(),
                    ])?;
                }
            }
        }
        write_atomic(&self.path(&lab_path), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;
        Ok(StageOutput { steps: 0, artifacts: vec![top1, topk, summary, rrc_path, sorted_path, lab_path] })
    }

    fn stage_noise_sweep(&self) -> Result<StageOutput> {
        let ev = &self.manifest.evaluation;
        let data = self.eval_split()?;
        let (classifiers, aes) = self.all_models()?;
        let cls: Vec<&dyn Classifier> = classifiers.iter().map(|c| c as &dyn Classifier).collect();
        let shared: [&dyn Preprocessor; 2] = [&Identity, &aes[0]];
        let mut sweeps = Vec::new();
        for &seed in &ev.noise_seeds {
            let mut sweep = noise_sweep(&cls, &shared, &data, &ev.noise_strengths, seed, ev.batch_size)?;
            for (c, ae) in classifiers.iter().zip(&aes[1..]) {
                let own = noise_sweep(&[c as &dyn Classifier], &[ae as &dyn Preprocessor], &data, &ev.noise_strengths, seed, ev.batch_size)?;
                sweep.curves.extend(own.curves);
            }
            sweeps.push(sweep);
        }
        let path = PathBuf::from("tables/noise_sweep.csv");
        write_atomic(&self.path(&path), &evaluate::sweeps_to_csv(&sweeps)?)?;
        let mean = PathBuf::from("tables/noise_sweep_mean.csv");
        write_atomic(&self.path(&mean), &NoiseSweep::mean_of(&sweeps)?.to_csv()?)?;
        Ok(StageOutput { steps: 0, artifacts: vec![path, mean] })
    }

    fn stage_fca(&self) -> Result<StageOutput> {
        let rrc_path = self.require("evaluate", Path::new("tables/rrc.csv"))?;
        let r = RrcMatrix::read_csv(std::fs::File::open(rrc_path)?)?;
        let (artifacts, _) = write_fca_outputs(&r, &self.manifest.evaluation.fca_thresholds, &self.run_dir)?;
        Ok(StageOutput { steps: 0, artifacts })
    }

    fn stage_nmi(&self) -> Result<StageOutput> {
        let ev = &self.manifest.evaluation;
        let data = self.eval_split()?;
        let (_, aes) = self.all_models()?;
        let mut reports: Vec<NmiReport> = Vec::new();
        for ae in &aes {
            reports.push(intra_nmi(ae, &data.images, ev.nmi_bins, ev.batch_size)?);
            reports.push(inter_nmi(ae, &data.images, ev.nmi_bins, ev.batch_size)?);
        }
        let json = PathBuf::from("tables/nmi.json");
        write_atomic(&self.path(&json), &serde_json::to_vec_pretty(&reports)?)?;
        let csv_path = PathBuf::from("tables/nmi.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &reports {
            w.serialize(r)?;
        }
        write_atomic(&self.path(&csv_path), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;
        Ok(StageOutput { steps: 0, artifacts: vec![json, csv_path] })
    }
}

fn threshold_tag(t: f64) -> String {
    format!("{t:.3}")
}

/// Context CSV and lattice DOT per threshold plus summary tables, under
/// `dir/lattices` and `dir/tables`. Returns the written paths relative to
/// `dir` and the total-order verdict per threshold.
pub fn write_fca_outputs(r: &RrcMatrix, thresholds: &[f64], dir: &Path) -> Result<(Vec<PathBuf>, Vec<(f64, bool)>)> {
    let mut paths = Vec::new();
    let mut verdicts = Vec::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "concepts", "edges", "total_order", "dot"])?;
    for &t in thresholds {
        let ctx = threshold_context(r, t)?;
        let lattice = concept_lattice(&ctx)?;
        let tag = threshold_tag(t);
        let ctx_path = PathBuf::from(format!("lattices/context_t{tag}.csv"));
        let dot_path = PathBuf::from(format!("lattices/lattice_t{tag}.dot"));
        ctx.write_csv(&dir.join(&ctx_path))?;
        write_atomic(&dir.join(&dot_path), export_dot(&lattice).as_bytes())?;
        let total = is_total_order(&lattice);
        verdicts.push((t, total));
        w.write_record([
            t.to_string(),
            lattice.concepts.len().to_string(),
            lattice.edges.len().to_string(),
            total.to_string(),
            dot_path.display().to_string(),
        ])?;
        paths.extend([ctx_path, dot_path]);
    }
    let summary = PathBuf::from("tables/fca_summary.csv");
    write_atomic(&dir.join(&summary), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;
    let bands = PathBuf::from("tables/fca_bands.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in threshold_bands(r)? {
        w.serialize(b)?;
    }
    write_atomic(&dir.join(&bands), &w.into_inner().map_err(|e| Error::Format { what: "csv", detail: e.to_string() })?)?;
    paths.extend([summary, bands]);
    Ok((paths, verdicts))
}

pub fn run_pipeline(manifest: ExperimentManifest, out_root: &Path, resume: bool) -> Result<RunRecord> {
    let stages = declared_stages(&manifest);
    let mut p = Pipeline::open(manifest, out_root)?;
    p.run_stages(&stages, resume)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_depend_only_on_global_seed_and_name() {
        assert_eq!(stage_seed(7, "pretrain"), stage_seed(7, "pretrain"));
        assert_ne!(stage_seed(7, "pretrain"), stage_seed(8, "pretrain"));
        assert_ne!(stage_seed(7, "pretrain"), stage_seed(7, "fca"));
    }

    #[test]
    fn declared_stage_names_are_unique() {
        let m = super::super::manifest::validate_manifest(include_str!("../../../../manifests/reference.toml")).unwrap();
        let names: Vec<String> = declared_stages(&m).iter().map(Stage::name).collect();
        let unique: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.first().unwrap(), "pretrain");
        assert_eq!(names.last().unwrap(), "report");
    }
}
