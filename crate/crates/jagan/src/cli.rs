//! The `jagan` command line.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};
use jagan_core::curation::filter_sequences;
use jagan_core::inference::{Anonymizer, FrameSequence};
use jagan_core::trainer::{
    Control, EvalRecord, StepReport, StopReason, TrainMode, TrainObserver, Trainer,
};
use log::LevelFilter;
use serde_json::json;

use crate::config::Config;
use crate::dataset::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingSource};
use crate::manifest::RunManifest;
use crate::{checkpoint, io, logging, sidecar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Face anonymization with two-stage inpainting GANs.
#[derive(Debug, Parser)]
#[command(name = "jagan", version)]
pub struct Cli {
    /// Seed for every random number generator; overrides `[train] seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,
    /// Log JSON lines instead of text.
    #[arg(long, global = true)]
    pub json_logs: bool,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an image model with separate discriminator and generator updates.
    TrainImage(TrainArgs),
    /// Train a video model conditioned on two past frames.
    TrainVideo(TrainArgs),
    /// Anonymize every face box of one PNG.
    AnonymizeImage(AnonymizeImageArgs),
    /// Anonymize one tracked face through a directory of frames.
    AnonymizeVideo(AnonymizeVideoArgs),
    /// Identity Invariance score between real and generated sequences.
    EvalIdi(EvalIdiArgs),
    /// Fréchet distance between two image directories.
    EvalFid(EvalFrechetArgs),
    /// Fréchet distance between two directories of sequences.
    EvalFvd(EvalFvdArgs),
    /// Track faces through a frame directory and emit training sequences.
    Curate(CurateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image directory (image mode) or split directory of sequences (video mode).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation data in the same layout; defaults to the training data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for the checkpoint and run manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnonymizeImageArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnonymizeVideoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub boxes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub no_burn_in: bool,
    #[arg(long)]
    pub burn_in_frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalIdiArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// `projection[:seed]` or `file:<path>`.
    #[arg(long, default_value = "projection")]
    pub embeddings: String,
}

#[derive(Debug, Args)]
pub struct EvalFrechetArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Images are resized to this square side before feature extraction.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct EvalFvdArgs {
    #[command(flatten)]
    pub common: EvalFrechetArgs,
    /// Clip length; defaults to the shortest sequence.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub frames: PathBuf,
    /// Sidecar with the detections of every frame.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sigma_iou: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_hamming: Option<u32>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainImage(_) => "train-image",
            Command::TrainVideo(_) => "train-video",
            Command::AnonymizeImage(_) => "anonymize-image",
            Command::AnonymizeVideo(_) => "anonymize-video",
            Command::EvalIdi(_) => "eval-idi",
            Command::EvalFid(_) => "eval-fid",
            Command::EvalFvd(_) => "eval-fvd",
            Command::Curate(_) => "curate",
        }
    }

    /// Manifest location when `--manifest` is not given.
    fn default_manifest(&self) -> Option<PathBuf> {
        match self {
            Command::TrainImage(a) | Command::TrainVideo(a) => Some(a.out.join(MANIFEST_FILE)),
            Command::AnonymizeImage(a) => Some(a.out.with_extension("run.json")),
            Command::AnonymizeVideo(a) => Some(a.out.join(MANIFEST_FILE)),
            Command::Curate(a) => Some(a.out.join(MANIFEST_FILE)),
            Command::EvalIdi(_) | Command::EvalFid(_) | Command::EvalFvd(_) => None,
        }
    }
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                kind => {
                    let _ = e.print();
                    if kind == ErrorKind::InvalidSubcommand {
                        eprintln!("{}", Cli::command().render_help());
                    }
                    EXIT_USAGE
                }
            };
        }
    };
    logging::init(cli.log_level, cli.json_logs);
    let seed = cli.seed.unwrap_or(0);
    let mut manifest = RunManifest::start(cli.command.name(), argv, seed);
    let manifest_path = cli
        .manifest
        .clone()
        .or_else(|| cli.command.default_manifest());
    let result = run(&cli, &mut manifest);
    let code = match &result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            manifest.finish(format!("error: {e}"));
            EXIT_RUNTIME
        }
    };
    if let Some(path) = manifest_path {
        if manifest.finished_unix.is_none() {
            manifest.finish("ok");
        }
        if let Err(e) = manifest.write(&path) {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    }
    code
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("JSON value serializes")
    );
}

pub fn run(cli: &Cli, manifest: &mut RunManifest) -> Result<()> {
    match &cli.command {
        Command::TrainImage(a) => train(cli, a, TrainMode::Image, manifest),
        Command::TrainVideo(a) => train(cli, a, TrainMode::Video, manifest),
        Command::AnonymizeImage(a) => anonymize_image(a, manifest),
        Command::AnonymizeVideo(a) => anonymize_video(a, manifest),
        Command::EvalIdi(a) => {
            let source = EmbeddingSource::parse(&a.embeddings, cli.seed.unwrap_or(0))?;
            let out = eval::idi(&a.real, &a.generated, &source)?;
            print_json(&serde_json::to_value(&out).expect("serializes"));
            Ok(())
        }
        Command::EvalFid(a) => {
            let out = eval::fid_dirs(&a.real, &a.generated, a.size, a.dim, cli.seed.unwrap_or(0))?;
            print_json(&serde_json::to_value(&out).expect("serializes"));
            Ok(())
        }
        Command::EvalFvd(a) => {
            let c = &a.common;
            let out = eval::fvd_dirs(
                &c.real,
                &c.generated,
                c.size,
                c.dim,
                a.frames,
                cli.seed.unwrap_or(0),
            )?;
            print_json(&serde_json::to_value(&out).expect("serializes"));
            Ok(())
        }
        Command::Curate(a) => curate(cli, a, manifest),
    }
}

struct CliObserver {
    interrupted: Arc<AtomicBool>,
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, report: &StepReport) -> Control {
        let l = &report.losses;
        log::info!(
            "step {}: d {:.5} r1 {:.5} g {:.5} rec_fine {:.5}",
            report.step,
            l.d_adv + l.video_d_adv,
            l.r1,
            l.g_total,
            l.rec_fine
        );
        if self.interrupted.load(Ordering::SeqCst) {
            Control::Stop
        } else {
            Control::Continue
        }
    }

    fn on_eval(&mut self, record: &EvalRecord, improved: bool) {
        log::info!(
            "eval at step {}: {:.6}{}",
            record.step,
            record.metric,
            if improved { " (best)" } else { "" }
        );
    }
}

fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install the interrupt handler: {e}");
    }
    flag
}

fn train(cli: &Cli, a: &TrainArgs, mode: TrainMode, manifest: &mut RunManifest) -> Result<()> {
    let mut config = Config::load_or_default(a.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.train.seed = Some(seed);
    }
    if let Some(n) = a.max_steps {
        config.train.max_steps = Some(n);
    }
    if let Some(n) = a.checkpoint_interval {
        config.train.checkpoint_interval = Some(n);
    }
    let load = |dir: &Path| match mode {
        TrainMode::Image => dataset::load_images(dir),
        TrainMode::Video => dataset::load_videos(dir),
    };
    let data = load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.mode() != mode {
                return Err(jagan_core::Error::CheckpointModeMismatch {
                    expected: mode.name(),
                    found: ckpt.mode().name(),
                }
                .into());
            }
            let mut t = Trainer::resume(&ckpt, &data)?;
            if let Some(n) = config.train.max_steps {
                t.set_max_steps(n);
            }
            log::info!("resumed {} at step {}", path.display(), t.step_count());
            t
        }
        None => {
            let net = config.model.net_config(mode)?;
            let train = config.train.train_config(mode)?;
            Trainer::new(net, train, config.loss.clone(), &data)?
        }
    };
    if let Some(val) = &a.val {
        trainer = trainer.with_validation(&load(val)?)?;
    }
    manifest.seed = trainer.config().seed;
    manifest.config = json!({
        "model": trainer.net_config(),
        "train": trainer.config(),
        "loss": config.loss,
        "checkpoint_interval": config.train.checkpoint_interval(),
    });
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    manifest.outputs.push(ckpt_path.clone());
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let interval = config.train.checkpoint_interval();
    let mut observer = CliObserver {
        interrupted: interrupt_flag(),
    };
    let reason = loop {
        match trainer.advance(&mut observer) {
            Ok(Some(reason)) => break reason,
            Ok(None) => {
                if interval > 0 && trainer.step_count() % interval == 0 {
                    checkpoint::save(&ckpt_path, &trainer.checkpoint())?;
                }
            }
            Err(e) => {
                checkpoint::save(&ckpt_path, &trainer.checkpoint())?;
                log::error!(
                    "training aborted; last good state (step {}) saved",
                    trainer.step_count()
                );
                return Err(e.into());
            }
        }
    };
    let ckpt = trainer.checkpoint();
    checkpoint::save(&ckpt_path, &ckpt)?;
    let stop = match reason {
        StopReason::MaxSteps => "max_steps",
        StopReason::Stagnation => "stagnation",
        StopReason::Interrupted => "interrupted",
    };
    manifest.finish(if reason == StopReason::Interrupted {
        "interrupted"
    } else {
        "ok"
    });
    print_json(&json!({
        "step": ckpt.step,
        "stop": stop,
        "best_metric": ckpt.best_metric,
        "best_step": ckpt.best_step,
        "checkpoint": ckpt_path,
    }));
    Ok(())
}

fn anonymize_image(a: &AnonymizeImageArgs, manifest: &mut RunManifest) -> Result<()> {
    let ckpt = checkpoint::load(&a.ckpt)?;
    let mut anonymizer = Anonymizer::from_checkpoint(&ckpt, TrainMode::Image)?;
    let frame = io::read_png(&a.input)?;
    let mut boxes = Vec::new();
    for e in sidecar::read(&a.boxes)? {
        boxes.extend(e.bounding_boxes()?);
    }
    let out = anonymizer.anonymize_image(&frame, &boxes)?;
    io::write_png(&a.out, &out)?;
    manifest.config = json!({ "checkpoint": a.ckpt, "faces": boxes.len() });
    manifest.outputs.push(a.out.clone());
    log::info!(
        "anonymized {} face(s) into {}",
        boxes.len(),
        a.out.display()
    );
    Ok(())
}

fn anonymize_video(a: &AnonymizeVideoArgs, manifest: &mut RunManifest) -> Result<()> {
    let config = Config::load_or_default(a.config.as_deref())?;
    let mut burn_in = config.inference.burn_in_config();
    if a.no_burn_in {
        burn_in.enabled = false;
    }
    if let Some(n) = a.burn_in_frames {
        burn_in.n_frames = n;
    }
    let ckpt = checkpoint::load(&a.ckpt)?;
    let mut anonymizer = Anonymizer::from_checkpoint(&ckpt, TrainMode::Video)?;
    let (paths, frames) = io::read_frames(&a.input)?;
    let boxes = sidecar::boxes_for(&sidecar::read(&a.boxes)?, &paths)?;
    let boxes = boxes
        .into_iter()
        .zip(&paths)
        .map(|(b, p)| match b.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Invalid(format!(
                "{}: expected exactly one face box, found {}",
                p.display(),
                b.len()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = FrameSequence {
        id: io::stem(&a.input),
        frames,
        boxes,
    };
    let out = anonymizer.anonymize_video(&seq, &burn_in)?;
    for (path, frame) in paths.iter().zip(&out.sequence.frames) {
        let target = a
            .out
            .join(path.file_name().expect("frame files have names"));
        io::write_png(&target, frame)?;
        manifest.outputs.push(target);
    }
    manifest.config = json!({ "checkpoint": a.ckpt, "inference": { "burn_in": burn_in.enabled, "burn_in_frames": burn_in.n_frames } });
    log::info!(
        "anonymized {} frames with {} generator calls",
        seq.len(),
        anonymizer.generator_calls()
    );
    Ok(())
}

fn curate(cli: &Cli, a: &CurateArgs, manifest: &mut RunManifest) -> Result<()> {
    let mut config = Config::load_or_default(a.config.as_deref())?;
    let c = &mut config.curation;
    c.sigma_iou = a.sigma_iou.unwrap_or(c.sigma_iou);
    c.min_len = a.min_len.unwrap_or(c.min_len);
    c.max_hamming = a.max_hamming.unwrap_or(c.max_hamming);
    c.resolution = a.resolution.unwrap_or(c.resolution);
    c.val_fraction = a.val_fraction.unwrap_or(c.val_fraction);
    c.test_fraction = a.test_fraction.unwrap_or(c.test_fraction);
    let (val, test) = (c.val_fraction, c.test_fraction);
    if !(val >= 0.0 && test >= 0.0 && val + test <= 1.0) {
        return Err(Error::Invalid(
            "split fractions must be non-negative and sum to at most 1".into(),
        ));
    }
    let params = c.params();
    let (paths, frames) = io::read_frames(&a.frames)?;
    let detections = sidecar::boxes_for(&sidecar::read(&a.detections)?, &paths)?;
    let sequences = filter_sequences(&frames, &detections, &params);
    let seed = cli.seed.unwrap_or(0);
    let stats = DatasetManifest {
        initial_frames: frames.len(),
        total_detections: detections.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    let (summary, dirs) = dataset::write_dataset(
        &a.out,
        &sequences,
        |s| dataset::assign_split(&s.id, seed, val, test),
        stats,
    )?;
    manifest.config = json!({ "curation": config.curation });
    manifest.outputs = dirs;
    manifest.outputs.push(a.out.join("manifest.json"));
    print_json(&serde_json::to_value(&summary).expect("serializes"));
    Ok(())
}
