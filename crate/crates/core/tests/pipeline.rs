use std::path::{Path, PathBuf};

use sigprobe::evaluate::{sort_rrc, RrcMatrix};
use sigprobe::modelzoo::load_classifier;
use sigprobe::orchestrator::pipeline::{declared_stages, file_sha256, run_dir_for, stage_seed, Pipeline, Stage, StageStatus};
use sigprobe::orchestrator::{load_manifest, run_pipeline, ExperimentManifest, RunRecord};
use sigprobe::Error;

fn smoke() -> ExperimentManifest {
    load_manifest(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/smoke.toml")).unwrap()
}

fn run(out: &Path) -> (RunRecord, PathBuf) {
    let m = smoke();
    let dir = run_dir_for(out, &m.digest().unwrap());
    (run_pipeline(m, out, false).unwrap(), dir)
}

#[test]
fn smoke_run_writes_every_declared_artifact() {
    let out = tempfile::tempdir().unwrap();
    let (rec, dir) = run(out.path());
    let names: Vec<String> = declared_stages(&smoke()).iter().map(Stage::name).collect();
    assert_eq!(rec.stages.iter().map(|s| s.name.clone()).collect::<Vec<_>>(), names);
    for s in &rec.stages {
        assert_eq!(s.status, StageStatus::Completed);
        assert_eq!(s.seed, stage_seed(rec.seed, &s.name));
        for a in &s.artifacts {
            assert_eq!(file_sha256(&dir.join(&a.path)).unwrap(), a.sha256, "{}", a.path.display());
        }
    }
    assert!(rec.training_steps() > 0);
    for sub in ["checkpoints", "tables", "figures", "lattices", "logs"] {
        assert!(dir.join(sub).is_dir());
    }
    assert!(dir.join("manifest.toml").exists());
    let stored: RunRecord = serde_json::from_slice(&std::fs::read(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(stored, rec);

    let rrc = RrcMatrix::read_csv(std::fs::File::open(dir.join("tables/rrc.csv")).unwrap()).unwrap();
    let bars = std::fs::read_to_string(dir.join("figures/rrc_sorted_bars.csv")).unwrap();
    let keys: Vec<String> = sort_rrc(&rrc).iter().map(|e| format!("{},{}", e.autoencoder, e.classifier)).collect();
    let listed: Vec<String> = bars.lines().skip(1).map(|l| l.splitn(3, ',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(listed, keys);

    let index = std::fs::read_to_string(dir.join("index.md")).unwrap();
    for link in index.split("](").skip(1).map(|s| &s[..s.find(')').unwrap()]) {
        assert!(dir.join(link).exists(), "dangling link {link}");
    }
    assert!(index.contains("figures/noise_sweep.png"));
}

#[test]
fn resume_verifies_and_trains_nothing() {
    let out = tempfile::tempdir().unwrap();
    let (first, dir) = run(out.path());
    let again = run_pipeline(smoke(), out.path(), true).unwrap();
    assert!(again.stages.iter().all(|s| s.status == StageStatus::Resumed));
    assert_eq!(again.training_steps(), 0);
    for (a, b) in first.stages.iter().zip(&again.stages) {
        assert_eq!(a.artifacts, b.artifacts);
    }

    std::fs::write(dir.join("tables/rrc.csv"), "tampered").unwrap();
    let third = run_pipeline(smoke(), out.path(), true).unwrap();
    let status = |n: &str| third.stage(n).unwrap().status;
    assert_eq!(status("finetune/vgg"), StageStatus::Resumed);
    for n in ["evaluate", "noise-sweep", "fca", "nmi", "report"] {
        assert_eq!(status(n), StageStatus::Completed, "{n}");
    }
    assert_eq!(third.training_steps(), 0);
}

#[test]
fn identical_manifests_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, _) = run(a.path());
    let (rb, _) = run(b.path());
    for (x, y) in ra.stages.iter().zip(&rb.stages) {
        assert_eq!(x.artifacts, y.artifacts, "{}", x.name);
    }
}

#[test]
fn seed_changes_the_run() {
    let out = tempfile::tempdir().unwrap();
    let (ra, dir_a) = run(out.path());
    let mut m = smoke();
    m.seed += 1;
    let dir_b = run_dir_for(out.path(), &m.digest().unwrap());
    assert_ne!(dir_a, dir_b);
    let rb = run_pipeline(m, out.path(), false).unwrap();
    assert_ne!(ra.stage("pretrain").unwrap().artifacts, rb.stage("pretrain").unwrap().artifacts);
}

#[test]
fn downstream_stage_without_inputs_names_the_missing_stage() {
    let out = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke(), out.path()).unwrap();
    for (stage, upstream) in [(Stage::Evaluate, "train-classifier"), (Stage::Report, "evaluate"), (Stage::Finetune("lenet".into()), "")] {
        match p.run_stage(&stage, false) {
            Err(Error::MissingArtifact { stage: s, .. }) => assert!(s.starts_with(upstream), "{s}"),
            other => panic!("{}: expected missing artifact, got {other:?}", stage.name()),
        }
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let out = tempfile::tempdir().unwrap();
    let (_, dir) = run(out.path());
    let path = dir.join("checkpoints/classifier_lenet.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_classifier(&path), Err(Error::Checksum { .. })));
}

#[test]
fn lattice_files_are_graphviz_digraphs() {
    let out = tempfile::tempdir().unwrap();
    let (_, dir) = run(out.path());
    let summary = std::fs::read_to_string(dir.join("tables/fca_summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let dot = std::fs::read_to_string(dir.join(cols[4])).unwrap();
        assert!(dot.starts_with("digraph lattice {") && dot.trim_end().ends_with('}'));
        assert_eq!(dot.matches(" [label=\"").count(), cols[1].parse::<usize>().unwrap());
        assert_eq!(dot.matches(" -> ").count(), cols[2].parse::<usize>().unwrap());
        assert!(!dot.contains("\n●"), "labels must use escaped line breaks");
    }
}
