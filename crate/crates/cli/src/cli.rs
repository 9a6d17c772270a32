use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use krill_core::curation::Resolution;
use krill_core::data::parse_manifest;
use krill_core::estimation::Task;
use krill_core::segmentation::{Segmenter, SplitPolicy};
use krill_core::View;
use log::warn;

use crate::commands::{self, board_root, parse_split};
use crate::service::{self, Detector, SegmenterDetector, Service};
use crate::summary::Summary;
use crate::workspace::{Workspace, WORKSPACE_ENV};

#[derive(Debug, Parser)]
#[command(name = "krill", version, about = "Krill board-photo pipeline")]
pub struct Cli {
    /// Workspace root holding krill.toml and every pipeline output.
    #[arg(long, global = true, env = WORKSPACE_ENV, default_value = ".")]
    pub workspace: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

impl Cli {
    pub fn log_level(&self) -> &'static str {
        match self.verbose {
            0 => "warn",
            1 => "info",
            _ => "debug",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViewArg {
    Lateral,
    Dorsal,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> View {
        match v {
            ViewArg::Lateral => View::Lateral,
            ViewArg::Dorsal => View::Dorsal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Length,
    Maturity,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Length => Task::Length,
            TaskArg::Maturity => Task::Maturity,
        }
    }
}

fn split_arg(s: &str) -> Result<SplitPolicy, String> {
    parse_split(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic boards, masks and a specimen table into the workspace.
    Synth {
        /// Board groups; each yields a dorsal and a lateral image.
        #[arg(long)]
        boards: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        per_board: Option<usize>,
    },
    /// Validate a specimen table against its boards and pair the views.
    Ingest {
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        boards: Option<PathBuf>,
    },
    /// Derive instance masks from manifest boxes by background colour distance.
    BootstrapMasks {
        #[arg(long)]
        tol: Option<f32>,
        /// Output directory (default: masks/).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Masks to score the result against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train the board segmenter.
    TrainSeg {
        #[arg(long)]
        epochs: Option<usize>,
        /// `random` or `cruise:NAME`.
        #[arg(long, value_parser = split_arg)]
        split: Option<SplitPolicy>,
        /// Split and initialisation seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Detect specimens on board images.
    Detect {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        boards: Option<PathBuf>,
        /// Minimum instance score, within [0, 1].
        #[arg(long, allow_negative_numbers = true)]
        threshold: Option<f32>,
        /// Only the held-out boards of the last training split.
        #[arg(long)]
        test_only: bool,
    },
    /// Mask AP of detections against ground-truth masks.
    Evaluate {
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        /// Every board with detections rather than the test split.
        #[arg(long)]
        all: bool,
    },
    /// Crop, centre and resize every retained specimen.
    Curate {
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<Resolution>>,
    },
    /// Train and evaluate one estimator.
    TrainEst(TrainEstArgs),
    /// Train every resolution, view and task and write the results table.
    Ladder {
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<Resolution>>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long, env = "KRILL_TOKEN")]
        token: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainEstArgs {
    #[arg(long, value_enum)]
    pub view: ViewArg,
    #[arg(long)]
    pub resolution: Resolution,
    #[arg(long, value_enum)]
    pub task: TaskArg,
}

/// Execute one command. Pipeline commands return their summary.
pub fn run(cli: Cli) -> Result<Option<Summary>> {
    let ws = Workspace::open(&cli.workspace)?;
    let cfg = ws.config()?;
    let summary = match cli.command {
        Command::Synth {
            boards,
            seed,
            per_board,
        } => commands::synth(
            &ws,
            cfg,
            &commands::SynthArgs {
                boards,
                seed,
                per_board,
            },
        )?,
        Command::Ingest { table, boards } => {
            commands::ingest(&ws, cfg, table.as_deref(), boards.as_deref())?
        }
        Command::BootstrapMasks {
            tol,
            out,
            reference,
        } => commands::bootstrap_masks(
            &ws,
            cfg,
            &commands::BootstrapArgs {
                tolerance: tol,
                out,
                reference,
            },
        )?,
        Command::TrainSeg {
            epochs,
            split,
            seed,
            masks,
        } => commands::train_seg(
            &ws,
            cfg,
            &commands::TrainSegArgs {
                epochs,
                split,
                seed,
                masks,
            },
        )?,
        Command::Detect {
            model,
            boards,
            threshold,
            test_only,
        } => commands::detect_boards(
            &ws,
            cfg,
            &commands::DetectArgs {
                model,
                boards,
                threshold,
                test_only,
            },
        )?,
        Command::Evaluate {
            masks,
            detections,
            all,
        } => commands::evaluate_detections(
            &ws,
            cfg,
            &commands::EvaluateArgs {
                masks,
                detections,
                all,
            },
        )?,
        Command::Curate { resolutions } => commands::curate(&ws, cfg, resolutions)?,
        Command::TrainEst(a) => {
            commands::train_est(&ws, cfg, a.view.into(), a.resolution, a.task.into())?
        }
        Command::Ladder { resolutions } => commands::ladder(&ws, cfg, resolutions)?,
        Command::Serve { bind, token } => {
            let mut cfg = cfg;
            if let Some(b) = bind {
                cfg.service.bind = b;
            }
            if token.is_some() {
                cfg.service.token = token;
            }
            let svc = open_service(&ws, &cfg)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(Arc::new(svc), &cfg.service.bind))?;
            return Ok(None);
        }
    };
    Ok(Some(summary))
}

/// Service over the workspace boards, seeded from the ingested manifest and
/// detecting with the trained segmenter when those exist.
pub fn open_service(ws: &Workspace, cfg: &crate::RunConfig) -> Result<Service> {
    let boards = board_root(ws)?;
    let manifest = if ws.manifest_path().exists() {
        let f = std::fs::File::open(ws.manifest_path())?;
        let parsed = parse_manifest(f, &boards, cfg.taxonomy.clone())
            .with_context(|| format!("reading {}", ws.manifest_path().display()))?;
        Some(parsed.manifest)
    } else {
        None
    };
    let detector: Option<Arc<dyn Detector>> = if ws.segmenter_path().exists() {
        let model = Segmenter::load(&ws.segmenter_path())?;
        Some(Arc::new(SegmenterDetector {
            model,
            threshold: cfg.detection.score_threshold,
        }))
    } else {
        warn!("no segmenter in the workspace; detection is disabled");
        None
    };
    Service::open(ws, cfg, &boards, manifest.as_ref(), detector)
}
