use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "classrecon",
    version,
    about = "Class reconstruction attacks on face classifiers"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat `key = value` experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent of `runs/` (default `artifacts`).
    #[arg(long, global = true)]
    pub out_root: Option<PathBuf>,
    /// Dataset: a `class_<k>/img_<i>.pgm` tree or a packed float32 file.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Override any config key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic face dataset (directory tree, or packed with a .f32 path).
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a victim classifier on the training split.
    TrainClassifier {
        /// cnn2, vgg11 or vgg11:<width>
        #[arg(long)]
        arch: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the noise predictor on the visible pool.
    TrainDiffusion {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long)]
        beta_end: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw one sample along the noise path of `--seed`.
    Sample {
        #[arg(long)]
        diffusion: PathBuf,
        /// Replace the injected noise with the path of this seed, keeping x_T.
        #[arg(long)]
        z_seed: Option<u64>,
        /// Image path (.png or .pgm); the raw tensor goes next to it as .f32.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize the starting noise of a fixed sampling path.
    AttackDiffusion {
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// full or checkpointed:<segment>
        #[arg(long)]
        grad_mode: Option<String>,
        #[arg(long)]
        optimize_noise: bool,
    },
    /// Train a generator against the classifier and a discriminator.
    AttackGan {
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        reinit_discriminator: bool,
    },
    /// Train the VAE on the visible pool.
    TrainVae {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune a VAE latent code against the classifier.
    AttackVae {
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        vae: PathBuf,
        /// pool or prior
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Gradient descent on raw pixels.
    AttackPixel {
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Repeat the noise-path attack on one path for several learning rates.
    LrStudy {
        #[command(flatten)]
        common: AttackArgs,
        #[arg(long)]
        diffusion: PathBuf,
        /// Comma-separated learning rates.
        #[arg(long, default_value = "1,10")]
        lrs: String,
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score saved attack results under an evaluation classifier.
    Report {
        #[arg(long)]
        eval_classifier: PathBuf,
        #[arg(long)]
        attacked_classifier: PathBuf,
        /// Result directories.
        #[arg(long, num_args = 1.., required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run pipeline stages into a run directory.
    Run {
        /// Comma-separated subset of data,classifiers,diffusion,vae,attacks,eval, or all.
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Rerun a finished run from its manifest and compare the artifacts.
    Replay {
        /// The run directory to replay.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    /// Attacked classifier checkpoint.
    #[arg(long)]
    pub classifier: PathBuf,
    /// Person id, 1-based.
    #[arg(long)]
    pub target: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
