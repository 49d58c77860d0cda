//! Command-line entry point for the fusion pipeline.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use mmfusion_core::{PipelineConfig, Precision};

use mmfusion::commands::{self, encode::StreamArg};
use mmfusion::config;
use mmfusion::errors::{report_and_exit, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mmfusion",
    version,
    about = "LiDAR-camera fusion detection pipeline: voxelization, per-voxel attention, cross-modal fusion, one-stage detection"
)]
struct Cli {
    /// Pipeline configuration (JSON); defaults match the published setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed (parameters, sampling, synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the voxelizer map phase; never affects results.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Scalar precision; overrides the config.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a point dump into voxels and write the batch.
    Voxelize {
        /// Input velodyne-style .bin point dump.
        #[arg(long)]
        input: PathBuf,
        /// Output voxel batch (MMVX).
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a single stream's stand-in encoder.
    Encode {
        #[arg(long, value_enum)]
        stream: StreamArg,
        /// BEV feature map (lidar) or image / feature file (image).
        #[arg(long)]
        input: PathBuf,
        /// Output feature map (MMFF).
        #[arg(long)]
        output: PathBuf,
        /// Parameter checkpoint (MMCK); seeded init when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-voxel attention features scattered onto the BEV plane.
    Vlpm {
        /// Input voxel batch (MMVX).
        #[arg(long)]
        input: PathBuf,
        /// Output BEV feature map (MMFF).
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fuse LiDAR and image feature maps.
    Fuse {
        #[arg(long)]
        lidar_features: PathBuf,
        #[arg(long)]
        image_features: PathBuf,
        /// Output fused map (MMFF).
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Overfit the full pipeline on synthetic scenes.
    TrainToy {
        /// Scene list (JSON, from `synth`).
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        /// Output checkpoint (MMCK).
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss trace (CSV).
        #[arg(long)]
        trace: PathBuf,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Per-parameter comparison table (CSV).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: break one analytic gradient on purpose.
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
    /// Time the pipeline stages on synthetic frames.
    Bench {
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Also time the stages after voxelization.
        #[arg(long)]
        full: bool,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate labeled synthetic scenes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Objects per scene.
        #[arg(long, default_value_t = 1)]
        objects: usize,
        /// Uniform noise points per scene.
        #[arg(long, default_value_t = 150)]
        noise: usize,
    },
}

fn effective_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => config::load_config(path)?,
        // The gradient check defaults to its dedicated tiny setup.
        None => match cli.command {
            Command::Gradcheck { .. } => PipelineConfig::tiny_gradcheck(),
            _ => PipelineConfig::default(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.voxel.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p.into();
    } else if matches!(cli.command, Command::Gradcheck { .. }) {
        // Gradient checks need 64-bit headroom below the tolerance.
        cfg.precision = Precision::F64;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> CliResult<()> {
    match &cli.command {
        Command::Voxelize { input, output } => {
            commands::voxelize::run(cfg, cli.workers, input, output)
        }
        Command::Encode {
            stream,
            input,
            output,
            checkpoint,
        } => match cfg.precision {
            Precision::F32 => {
                commands::encode::run::<f32>(cfg, *stream, input, output, checkpoint.as_deref())
            }
            Precision::F64 => {
                commands::encode::run::<f64>(cfg, *stream, input, output, checkpoint.as_deref())
            }
        },
        Command::Vlpm {
            input,
            output,
            checkpoint,
        } => match cfg.precision {
            Precision::F32 => commands::vlpm::run::<f32>(cfg, input, output, checkpoint.as_deref()),
            Precision::F64 => commands::vlpm::run::<f64>(cfg, input, output, checkpoint.as_deref()),
        },
        Command::Fuse {
            lidar_features,
            image_features,
            output,
            checkpoint,
        } => match cfg.precision {
            Precision::F32 => commands::fuse::run::<f32>(
                cfg,
                lidar_features,
                image_features,
                output,
                checkpoint.as_deref(),
            ),
            Precision::F64 => commands::fuse::run::<f64>(
                cfg,
                lidar_features,
                image_features,
                output,
                checkpoint.as_deref(),
            ),
        },
        Command::TrainToy {
            scenes,
            steps,
            lr,
            out,
            trace,
        } => match cfg.precision {
            Precision::F32 => {
                commands::train_toy::run::<f32>(cfg, scenes, *steps, *lr, out, trace)
            }
            Precision::F64 => {
                commands::train_toy::run::<f64>(cfg, scenes, *steps, *lr, out, trace)
            }
        },
        Command::Gradcheck {
            tol,
            out,
            corrupt_grad,
        } => commands::gradcheck::run(cfg, *tol, out.as_deref(), corrupt_grad.as_deref()),
        Command::Bench {
            frames,
            reps,
            full,
            out,
        } => commands::bench::run(cfg, cli.workers, *frames, *reps, *full, out.as_deref()),
        Command::Synth {
            out,
            count,
            objects,
            noise,
        } => commands::synth::run(cfg, out, *count, *objects, *noise),
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("MMFUSION_LOG", "warn"),
    )
    .init();
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => report_and_exit(e),
    };
    if let Err(e) = dispatch(&cli, &cfg) {
        report_and_exit(e);
    }
}
