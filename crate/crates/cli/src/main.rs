use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

mod run;
mod stages;

#[derive(Parser)]
#[command(name = "unipart", version, about = "Part-level 3D generation on procedural toy shapes")]
struct Cli {
    /// Log at debug level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Run-scale overrides shared by the training stages.
#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Run configuration (TOML); defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `unipart dataset`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Sampler overrides for the generation commands.
#[derive(Args, Clone, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print a full configuration file.
    Config {
        /// The micro preset used by the smoke tests instead of the defaults.
        #[arg(long)]
        micro: bool,
    },
    /// Generate procedural objects into train/val/test split files.
    Dataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Half-open seed range, e.g. `0..2000`.
        #[arg(long, default_value = "0..64")]
        seed_range: String,
        /// Inclusive part-count range, e.g. `2..4`.
        #[arg(long)]
        parts: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
        split_fractions: Vec<f64>,
    },
    /// Train the geometry-segmentation VAE.
    TrainVae(TrainArgs),
    /// Train the anchor-position decoder of a trained VAE.
    TrainPos {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train the whole-object flow model on VAE latents.
    TrainWhole {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Train the dual-space part flow model on VAE latents.
    TrainPart {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        vae: PathBuf,
    },
    /// Sample a whole-object latent from a condition image.
    GenerateWhole {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        whole: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split a latent set into parts.
    SegmentLatent {
        #[arg(long)]
        config: Option<PathBuf>,
        /// VAE checkpoint with a trained position decoder.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input_latent: PathBuf,
        /// Number of prompts.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        nms_iou: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate and compose the parts of a segmented latent.
    GenerateParts {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        part: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        whole_latent: PathBuf,
        /// `segmentation.json` from `segment-latent`.
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Image to composed part meshes in one go.
    Generate {
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        whole: PathBuf,
        #[arg(long)]
        part: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score meshes against references, or run the full benchmark on a
    /// dataset split.
    Eval(stages::EvalArgs),
    /// Write reference meshes and condition images of a split, or convert a
    /// mesh between OBJ and PLY.
    Export(stages::ExportArgs),
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = dispatch(cli.command) {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Config { micro } => stages::print_config(micro),
        Command::Dataset { config, out, seed_range, parts, split_fractions } => {
            stages::dataset(config.as_deref(), &out, &seed_range, parts.as_deref(), &split_fractions)
        }
        Command::TrainVae(args) => stages::train_vae(&args),
        Command::TrainPos { train, vae } => stages::train_pos(&train, &vae),
        Command::TrainWhole { train, vae } => stages::train_whole(&train, &vae),
        Command::TrainPart { train, vae } => stages::train_part(&train, &vae),
        Command::GenerateWhole { sample, whole, image, out_dir } => stages::generate_whole(&sample, &whole, &image, &out_dir),
        Command::SegmentLatent { config, checkpoint, input_latent, k, nms_iou, out_dir } => {
            stages::segment(config.as_deref(), &checkpoint, &input_latent, k, nms_iou, &out_dir)
        }
        Command::GenerateParts { sample, vae, part, image, whole_latent, seg, out_dir } => {
            stages::generate_parts(&sample, &vae, &part, &image, &whole_latent, &seg, &out_dir)
        }
        Command::Generate { sample, vae, whole, part, image, out_dir } => {
            stages::generate(&sample, &vae, &whole, &part, &image, &out_dir)
        }
        Command::Eval(args) => stages::eval(&args),
        Command::Export(args) => stages::export(&args),
    }
}
