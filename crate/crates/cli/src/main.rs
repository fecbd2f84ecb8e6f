//! `gebd`: synthetic data, training, inference, ensembling, peak detection
//! and evaluation for generic event boundary detection.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gebd_core::data::{self, LabeledVideo};
use gebd_core::evaluation::{self, Matching};
use gebd_core::inference::{self, BoundaryScores};
use gebd_core::network::{self, ScTransformer};
use gebd_core::training::{self, EpochReport};
use rayon::prelude::*;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "gebd", version, about = "Generic event boundary detection toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/test dataset to the data directories.
    Synth {
        /// Replace existing non-empty data directories.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes per-epoch checkpoints, model.ckpt and loss_curve.txt.
    Train,
    /// Score every video of a dataset with a checkpoint.
    Infer {
        /// Defaults to <out_dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to the test directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average several score dumps frame by frame.
    Ensemble {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
    },
    /// Turn a score dump into boundary timestamps.
    Detect {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against annotations, one report line per threshold.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        /// Defaults to the test directory's annotations.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum bipartite matching instead of greedy.
        #[arg(long)]
        optimal: bool,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Synth { force } => cmd_synth(&cfg, *force),
        Command::Train => cmd_train(&cfg),
        Command::Infer { checkpoint, data, out } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| cfg.train.out_dir.join("model.ckpt"));
            let dir = data.as_deref().unwrap_or(&cfg.data.test_dir);
            cmd_infer(&cfg, &ckpt, dir, out)
        }
        Command::Ensemble { out, scores } => cmd_ensemble(scores, out),
        Command::Detect { scores, out } => cmd_detect(&cfg, scores, out),
        Command::Eval {
            detections,
            annotations,
            out,
            optimal,
        } => {
            let anns = annotations
                .clone()
                .unwrap_or_else(|| cfg.data.test_dir.join(data::ANNOTATION_FILE));
            let matching = if *optimal { Matching::Optimal } else { Matching::Greedy };
            cmd_eval(&cfg, detections, &anns, out.as_deref(), matching)
        }
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

/// Builds `target` in a sibling staging directory and moves it into place,
/// so a failure leaves nothing behind.
fn write_dir_atomically(target: &Path, force: bool, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if is_nonempty_dir(target) && !force {
        bail!("{} exists and is not empty (pass --force to replace it)", target.display());
    }
    let name = target
        .file_name()
        .with_context(|| format!("{} has no directory name", target.display()))?;
    let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    if let Err(e) = fill(&staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    if target.exists() {
        std::fs::remove_dir_all(target).with_context(|| format!("removing {}", target.display()))?;
    }
    std::fs::rename(&staging, target).with_context(|| format!("moving data into {}", target.display()))
}

fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let spec = cfg.synth_spec();
    let videos = data::synth_generate(&spec)?;
    let (train, test) = videos.split_at(cfg.synth.train_videos);
    if cfg.data.train_dir == cfg.data.test_dir {
        bail!("data.train_dir and data.test_dir must differ");
    }
    write_dir_atomically(&cfg.data.train_dir, force, |d| Ok(data::save_synthetic(d, train)?))?;
    write_dir_atomically(&cfg.data.test_dir, force, |d| Ok(data::save_synthetic(d, test)?))?;
    log::info!(
        "wrote {} train videos to {} and {} test videos to {}",
        train.len(),
        cfg.data.train_dir.display(),
        test.len(),
        cfg.data.test_dir.display()
    );
    Ok(())
}

fn load_split(dir: &Path, use_flow: bool) -> Result<Vec<LabeledVideo>> {
    data::load_dataset(dir, use_flow).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_set = load_split(&cfg.data.train_dir, cfg.use_flow())?;
    let channels = train_set.first().map(|v| v.features.channels()).unwrap_or(0);
    if channels != cfg.model.channels {
        bail!(
            "features in {} have {channels} channels but model.channels is {}",
            cfg.data.train_dir.display(),
            cfg.model.channels
        );
    }
    let val = if cfg.train.validate {
        Some(load_split(&cfg.data.test_dir, cfg.use_flow())?)
    } else {
        None
    };
    let out = &cfg.train.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    gebd_core::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut model = ScTransformer::new(cfg.model.clone(), cfg.seed)?;
    log::info!(
        "training {} ({} parameters) on {} videos, size {} modalities {:?}",
        out.display(),
        model.params().num_scalars(),
        train_set.len(),
        cfg.meta.size,
        cfg.meta.modalities
    );
    let mut curve: Vec<EpochReport> = Vec::new();
    let curve_path = out.join("loss_curve.txt");
    training::train(&mut model, &train_set, val.as_deref(), &cfg.train_config(), |report, m| {
        network::save_checkpoint(m, &out.join(format!("epoch_{:03}.ckpt", report.epoch + 1)))?;
        curve.push(*report);
        gebd_core::write_atomic(&curve_path, training::format_curve(&curve).as_bytes())
    })?;
    network::save_checkpoint(&model, &out.join("model.ckpt"))?;
    log::info!("final checkpoint {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, dir: &Path, out: &Path) -> Result<()> {
    let model = network::load_checkpoint(checkpoint)?;
    let features = data::load_dataset_features(dir, cfg.use_flow())
        .with_context(|| format!("loading features from {}", dir.display()))?;
    let scores = features
        .par_iter()
        .map(|f| inference::score_video(&model, f))
        .collect::<gebd_core::Result<Vec<BoundaryScores>>>()?;
    inference::save_scores(&scores, out)?;
    log::info!("scored {} videos into {}", scores.len(), out.display());
    Ok(())
}

fn cmd_ensemble(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let dumps = inputs
        .iter()
        .map(|p| inference::load_scores(p))
        .collect::<gebd_core::Result<Vec<_>>>()?;
    let merged = inference::ensemble_dumps(&dumps)?;
    inference::save_scores(&merged, out)?;
    log::info!("averaged {} dumps into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_detect(cfg: &RunConfig, scores: &Path, out: &Path) -> Result<()> {
    let dets: Vec<_> = inference::load_scores(scores)?
        .iter()
        .map(|s| inference::detect(s, cfg.post.radius, cfg.post.threshold))
        .collect();
    inference::save_detections(&dets, out)?;
    let n: usize = dets.iter().map(|d| d.boundary_times_s.len()).sum();
    log::info!("{n} boundaries in {} videos written to {}", dets.len(), out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, detections: &Path, annotations: &Path, out: Option<&Path>, matching: Matching) -> Result<()> {
    let dets = inference::load_detections(detections)?;
    let anns = data::load_annotations(annotations)?;
    let mut report = String::new();
    for &r in &cfg.eval.rel_dis {
        report.push_str(&evaluation::evaluate(&dets, &anns, r, matching)?.to_line());
        report.push('\n');
    }
    if let Some(p) = out {
        gebd_core::write_atomic(p, report.as_bytes())?;
    }
    print!("{report}");
    Ok(())
}
