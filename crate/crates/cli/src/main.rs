use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use sigprobe::evaluate::{rrc, sort_rrc, write_sorted_rrc, AccuracyMatrix, RrcConvention, RrcMatrix};
use sigprobe::finetune::UpdateTarget;
use sigprobe::orchestrator::pipeline::{declared_stages, device, write_fca_outputs, Pipeline, Stage};
use sigprobe::orchestrator::{load_manifest, write_atomic, ExperimentManifest, RunRecord};
use sigprobe::Error;

#[derive(Parser)]
#[command(name = "sigprobe", version, about = "Probe the input signal classifiers use through coupled autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment manifest (TOML).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output root; runs land in <out>/runs/<digest>.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the manifest's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Skip stages whose recorded artifacts still verify.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the base autoencoder.
    Pretrain(Common),
    /// Train the classifiers and fine-tune one autoencoder per classifier.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Restrict to these classifiers.
        #[arg(long, value_delimiter = ',')]
        classifier: Vec<String>,
        /// Overrides the partition updated during fine-tuning.
        #[arg(long, value_parser = parse_target)]
        update_target: Option<UpdateTarget>,
    },
    /// Cross-evaluation accuracy matrix, RRC and LAB histograms.
    EvalMatrix(Common),
    /// RRC from a run, or from an accuracy matrix CSV.
    Rrc {
        #[command(flatten)]
        common: Common,
        /// Accuracy matrix CSV (rows A_<id>, optional identity row).
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, value_parser = parse_convention, default_value = "diagonal")]
        convention: RrcConvention,
    },
    /// Top-1 under additive uniform noise.
    NoiseSweep(Common),
    /// Concept lattices of thresholded RRC tables.
    Fca {
        #[command(flatten)]
        common: Common,
        /// RRC matrix CSV to analyse instead of a run.
        #[arg(long)]
        rrc: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
    },
    /// Intra and inter nMI per autoencoder.
    Nmi(Common),
    /// Figures and index document.
    Report(Common),
    /// Full pipeline.
    Run(Common),
}

fn parse_target(s: &str) -> Result<UpdateTarget, String> {
    match s {
        "encoder" => Ok(UpdateTarget::Encoder),
        "decoder" => Ok(UpdateTarget::Decoder),
        "both" => Ok(UpdateTarget::Both),
        _ => Err(format!("unknown update target {s}")),
    }
}

fn parse_convention(s: &str) -> Result<RrcConvention, String> {
    match s {
        "diagonal" => Ok(RrcConvention::Diagonal),
        "standalone" => Ok(RrcConvention::Standalone),
        _ => Err(format!("unknown convention {s}")),
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn manifest(c: &Common) -> Result<ExperimentManifest, Failure> {
    let path = c.manifest.as_ref().ok_or_else(|| Failure::Usage("--manifest is required".into()))?;
    let mut m = load_manifest(path)?;
    if let Some(seed) = c.seed {
        m.seed = seed;
        m.validate()?;
    }
    Ok(m)
}

fn run_stages(c: &Common, m: ExperimentManifest, pick: impl Fn(&Stage) -> bool) -> Result<RunRecord, Failure> {
    let stages: Vec<Stage> = declared_stages(&m).into_iter().filter(|s| pick(s)).collect();
    let mut p = Pipeline::open(m, &c.out)?;
    let record = p.run_stages(&stages, c.resume)?;
    for s in stages.iter().filter_map(|s| record.stage(&s.name())) {
        println!("{:<28} {:?} steps={} {:.1}s", s.name, s.status, s.training_steps, s.wall_seconds);
    }
    println!("{}", p.run_dir.display());
    Ok(record)
}

fn standalone_rrc(matrix: &Path, convention: RrcConvention, out: &Path) -> Result<(), Failure> {
    let m = AccuracyMatrix::read_csv(std::fs::File::open(matrix).map_err(Error::from)?)?;
    let r = rrc(&m, convention)?;
    r.write_csv(&out.join("rrc.csv"))?;
    let mut buf = Vec::new();
    write_sorted_rrc(&sort_rrc(&r), &mut buf)?;
    write_atomic(&out.join("rrc_sorted.csv"), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    device()?;
    match cmd {
        Command::Pretrain(c) => run_stages(&c, manifest(&c)?, |s| *s == Stage::Pretrain).map(drop),
        Command::Finetune { common, classifier, update_target } => {
            let mut m = manifest(&common)?;
            if let Some(t) = update_target {
                m.finetune.update_target = t;
                m.finetune_overrides.values_mut().for_each(|f| f.update_target = t);
            }
            let keep = |id: &String| classifier.is_empty() || classifier.contains(id);
            run_stages(&common, m, |s| match s {
                Stage::TrainClassifier(id) | Stage::Finetune(id) => keep(id),
                _ => false,
            })
            .map(drop)
        }
        Command::EvalMatrix(c) => run_stages(&c, manifest(&c)?, |s| *s == Stage::Evaluate).map(drop),
        Command::Rrc { common, matrix, convention } => match matrix {
            Some(path) => standalone_rrc(&path, convention, &common.out),
            None => {
                let p = Pipeline::open(manifest(&common)?, &common.out)?;
                let src = p.path("tables/accuracy_top1.csv");
                if !src.exists() {
                    return Err(Error::MissingArtifact { stage: "evaluate".into(), path: src }.into());
                }
                standalone_rrc(&src, convention, &p.path("tables"))
            }
        },
        Command::NoiseSweep(c) => run_stages(&c, manifest(&c)?, |s| *s == Stage::NoiseSweep).map(drop),
        Command::Fca { common, rrc: Some(path), thresholds } => {
            let r = RrcMatrix::read_csv(std::fs::File::open(&path).map_err(Error::from)?)?;
            let thresholds = if thresholds.is_empty() { vec![0.1, 0.2, 0.8, 0.9] } else { thresholds };
            let (paths, verdicts) = write_fca_outputs(&r, &thresholds, &common.out)?;
            for (t, total) in verdicts {
                println!("t={t} total_order={total}");
            }
            for p in paths {
                println!("{}", common.out.join(p).display());
            }
            Ok(())
        }
        Command::Fca { common, rrc: None, thresholds } => {
            let mut m = manifest(&common)?;
            if !thresholds.is_empty() {
                m.evaluation.fca_thresholds = thresholds;
            }
            run_stages(&common, m, |s| *s == Stage::Fca).map(drop)
        }
        Command::Nmi(c) => run_stages(&c, manifest(&c)?, |s| *s == Stage::Nmi).map(drop),
        Command::Report(c) => run_stages(&c, manifest(&c)?, |s| *s == Stage::Report).map(drop),
        Command::Run(c) => run_stages(&c, manifest(&c)?, |_| true).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            error!("{e}");
            if e.is_invariant_breach() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
