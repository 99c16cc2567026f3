//! `agssp`: anomaly maps to pseudo-labels, distillation targets and metrics.

mod commands;
mod config;
mod error;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use agssp_core::synth::{DefectGeometry, SynthSpec, TokenSpec};
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{parse_layer_size, DistillArgs, ImageScoreKind};
use crate::config::{BoxArgs, DistillNorm, FileConfig, ScoringArgs};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "agssp", version, about)]
struct Cli {
    /// Settings file (default: ./agssp.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (capped by AGSSP_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute anomaly maps and scores from patch tokens.
    Score {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for maps, scores.json and the updated manifest.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Turn anomaly maps into COCO pseudo-defect boxes.
    Boxes {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        boxes: BoxArgs,
    },
    /// Resize maps to feature-layer sizes and report distillation losses.
    DistillTargets {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated layer sizes, each `N` or `HxW`.
        #[arg(long, value_delimiter = ',', value_parser = parse_layer_size, required = true)]
        layers: Vec<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
        /// Normalization of attention maps and targets for the L2 loss.
        #[arg(long, value_enum)]
        distill_norm: Option<DistillNorm>,
        /// Initial task loss; enables the lambda column.
        #[arg(long)]
        task_loss: Option<f64>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Evaluate maps, scores or boxes.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Mean mask IoU for a range of delta values.
    SweepDelta {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        deltas: Vec<f64>,
        /// Directory for sweep.json and sweep.csv (default: JSON on stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        boxes: BoxArgs,
    },
    /// Generate a synthetic dataset with planted defects.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, value_enum, default_value_t = Geometry::Gaussian)]
        geometry: Geometry,
        #[arg(long)]
        defect_free: Option<f64>,
        /// Also write patch tokens, global tokens and text embeddings.
        #[arg(long)]
        tokens: bool,
    },
    /// Blend an anomaly map over an image as a heat overlay.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Image-level AUROC against image labels.
    Auroc {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = ImageScoreKind::AsX)]
        score: ImageScoreKind,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Pixel-level AUROC against ground-truth masks.
    PixelAuroc {
        #[arg(long)]
        manifest: PathBuf,
        /// Evaluate every n-th pixel in each direction.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Mean mask IoU of binarized maps at one delta.
    Iou {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        boxes: BoxArgs,
    },
    /// mAP@0.5 and mAP@0.5:0.95 of COCO detections.
    Map {
        #[arg(long)]
        pred: PathBuf,
        /// COCO ground truth (default: boxes listed in --manifest).
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Geometry {
    Gaussian,
    Rect,
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::locate(cli.config.as_deref())?;
    let threads = config::threads(cli.threads, &file)?;
    match cli.command {
        Command::Score {
            manifest,
            out,
            scoring,
        } => commands::score(&manifest, &scoring.resolve(&file.scoring), &out, threads),
        Command::Boxes {
            manifest,
            out,
            scoring,
            boxes,
        } => commands::boxes(
            &manifest,
            &scoring.resolve(&file.scoring),
            &boxes.resolve(&file.boxes)?,
            &out,
            threads,
        ),
        Command::DistillTargets {
            manifest,
            layers,
            out,
            distill_norm,
            task_loss,
            scoring,
        } => commands::distill_targets(DistillArgs {
            manifest: &manifest,
            scoring: &scoring.resolve(&file.scoring),
            layers: &layers,
            normalization: config::distill_norm(distill_norm, &file.distill),
            task_loss,
            out: &out,
            threads,
        }),
        Command::Eval(e) => match e {
            EvalCommand::Auroc {
                manifest,
                score,
                out,
                scoring,
            } => commands::eval_auroc(
                &manifest,
                &scoring.resolve(&file.scoring),
                score,
                threads,
                out.as_deref(),
            ),
            EvalCommand::PixelAuroc {
                manifest,
                stride,
                out,
                scoring,
            } => commands::eval_pixel_auroc(
                &manifest,
                &scoring.resolve(&file.scoring),
                stride,
                threads,
                out.as_deref(),
            ),
            EvalCommand::Iou {
                manifest,
                out,
                scoring,
                boxes,
            } => commands::eval_iou(
                &manifest,
                &scoring.resolve(&file.scoring),
                &boxes.resolve(&file.boxes)?,
                threads,
                out.as_deref(),
            ),
            EvalCommand::Map {
                pred,
                gt,
                manifest,
                out,
            } => commands::eval_map(&pred, gt.as_deref(), manifest.as_deref(), out.as_deref()),
        },
        Command::SweepDelta {
            manifest,
            deltas,
            out,
            scoring,
            boxes,
        } => commands::sweep(
            &manifest,
            &scoring.resolve(&file.scoring),
            &boxes.resolve(&file.boxes)?,
            &deltas,
            threads,
            out.as_deref(),
        ),
        Command::Synth {
            seed,
            n,
            out,
            height,
            width,
            geometry,
            defect_free,
            tokens,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                seed,
                num_images: n,
                height,
                width,
                geometry: match geometry {
                    Geometry::Gaussian => DefectGeometry::GaussianBump,
                    Geometry::Rect => DefectGeometry::Rect,
                },
                defect_free_fraction: defect_free.unwrap_or(d.defect_free_fraction),
                tokens: tokens.then(TokenSpec::default),
                ..d
            };
            let manifest = commands::synth(&spec, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Overlay { image, map, out } => overlay::render(&image, &map, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
