use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmfuse::data::Split;
use dmfuse::pipeline::{
    cmd_ablate, cmd_eval, cmd_fuse, cmd_phantom, cmd_train_fusion, cmd_train_recon, AblationMode,
    FuseInput, FusionConfig, RunContext,
};
use dmfuse::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dmfuse",
    version,
    about = "Diffusion-feature multimodal medical image fusion"
)]
struct Cli {
    /// TOML run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for datasets, checkpoints, outputs and manifests.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic phantom dataset.
    Phantom,
    /// Stage I: train the denoising reconstructor.
    TrainRecon,
    /// Stage II: train the fusion network over a frozen reconstructor.
    TrainFusion {
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Fuse a dataset split or a single pair.
    Fuse {
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Structural image of a single pair (requires --b).
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        /// Second image of a single pair (gray or color).
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
    },
    /// Score fused images against their source pairs.
    Eval {
        #[arg(long)]
        fused_dir: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Run ablation studies.
    Ablate {
        /// loss-grid, time-steps, no-diffusion, no-amff, no-msff or all.
        #[arg(long, default_value = "all")]
        mode: String,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code and short class name for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => (2, "config"),
        Error::EmptyDataset(_) | Error::Manifest(_) | Error::DigestMismatch { .. } => (3, "data"),
        Error::Checkpoint(_) => (4, "checkpoint"),
        Error::Io { .. } | Error::Image { .. } => (5, "io"),
        Error::NonFinite { .. } => (6, "training"),
        Error::Shape(_) | Error::StepOutOfRange { .. } => (7, "shape"),
    }
}

fn run(cli: Cli) -> dmfuse::Result<()> {
    let mut config = match &cli.config {
        Some(path) => FusionConfig::load(path)?,
        None => FusionConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = RunContext::new(config, &cli.out_dir)?;
    let out = |name: &str| cli.out_dir.join(name);
    match cli.command {
        Command::Phantom => {
            let m = cmd_phantom(&ctx)?;
            println!("wrote {} files", m.artifacts.len());
        }
        Command::TrainRecon => {
            let m = cmd_train_recon(&ctx)?;
            for c in &m.curves {
                println!(
                    "{}: first-100 mean {:.5}, last-100 mean {:.5}",
                    c.name, c.head_mean_100, c.tail_mean_100
                );
            }
        }
        Command::TrainFusion { recon } => {
            let recon = recon.unwrap_or_else(|| out("recon.ckpt"));
            let m = cmd_train_fusion(&ctx, &recon)?;
            for c in &m.curves {
                println!(
                    "{}: first-100 mean {:.5}, last-100 mean {:.5}",
                    c.name, c.head_mean_100, c.tail_mean_100
                );
            }
        }
        Command::Fuse {
            recon,
            fusion,
            split,
            a,
            b,
        } => {
            let recon = recon.unwrap_or_else(|| out("recon.ckpt"));
            let fusion = fusion.unwrap_or_else(|| out("fusion.ckpt"));
            let input = match (a, b) {
                (Some(a), Some(b)) => FuseInput::Pair { a, b },
                _ => FuseInput::Split(split),
            };
            let o = cmd_fuse(&ctx, &recon, &fusion, &input)?;
            println!("fused {} pairs into {}", o.fused.len(), o.dir.display());
        }
        Command::Eval { fused_dir, split } => {
            let dir = fused_dir.unwrap_or_else(|| out("fused"));
            let o = cmd_eval(&ctx, &dir, split)?;
            print!("{}", o.table);
        }
        Command::Ablate { mode } => {
            let modes = if mode == "all" {
                AblationMode::ALL.to_vec()
            } else {
                vec![mode.parse()?]
            };
            for r in cmd_ablate(&ctx, &modes)? {
                println!("{}", r.table);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, class) = classify(&e);
            eprintln!("dmfuse: {class} error: {e}");
            ExitCode::from(code)
        }
    }
}
