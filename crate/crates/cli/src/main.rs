//! `attnsplat`: masked, attention-weighted Gaussian splatting from the
//! command line. The full pipeline is `mask -> attention -> sfm -> train ->
//! eval`, one subcommand per stage.

mod commands;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use commands::TrainArgs;
use failure::{CliResult, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "attnsplat",
    version,
    about = "Masked, attention-weighted 3D Gaussian splatting"
)]
struct Cli {
    /// Worker threads; defaults to the machine's available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Binarize saliency into masks and white-composite the images.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = attnsplat::imaging::DEFAULT_SALIENCY_THRESHOLD)]
        threshold: f64,
        /// Precomputed saliency maps named after the input images.
        #[arg(long)]
        saliency_dir: Option<PathBuf>,
    },
    /// Sobel attention maps as quantized PGM plus a lossless PFM sidecar.
    Attention {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse reconstruction restricted to the scene masks.
    Sfm {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use whole images and skip background filtering.
        #[arg(long)]
        no_mask: bool,
        /// TOML file with reconstruction settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Optimize splats against the scene's training views.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// Splat PLY or sparse point-cloud PLY.
        #[arg(long)]
        init: PathBuf,
        /// TOML training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_attention: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render one camera to an image.
    Render {
        #[arg(long)]
        splats: PathBuf,
        /// Cameras JSON (a single camera or an array).
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Quality metrics over the scene's eval views, written as CSV.
    Eval {
        #[arg(long)]
        splats: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frames for the FPS measurement; 0 skips it.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Run metadata from `train`, for the training time column.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Rendering throughput over the scene's cameras.
    Bench {
        #[arg(long)]
        splats: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 300)]
        frames: usize,
    },
    /// Write a synthetic scene with ground truth.
    Synth {
        /// JSON synthetic scene spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::validation("setup", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime("setup", e.to_string()))?;
    }
    match cli.command {
        Command::Mask {
            input,
            out,
            threshold,
            saliency_dir,
        } => commands::mask(&input, &out, threshold, saliency_dir.as_deref()),
        Command::Attention { input, out } => commands::attention(&input, &out),
        Command::Sfm {
            scene,
            out,
            no_mask,
            config,
        } => commands::sfm(&scene, &out, no_mask, config.as_deref()),
        Command::Train {
            scene,
            init,
            config,
            out,
            no_attention,
            iterations,
            seed,
        } => commands::train_cmd(&TrainArgs {
            scene: &scene,
            init: &init,
            config: config.as_deref(),
            out: &out,
            no_attention,
            iterations,
            seed,
        }),
        Command::Render {
            splats,
            camera,
            index,
            out,
            width,
            height,
        } => commands::render(&splats, &camera, index, &out, width, height),
        Command::Eval {
            splats,
            scene,
            out,
            frames,
            run,
        } => commands::eval(&splats, &scene, &out, frames, run.as_deref()).map(drop),
        Command::Bench {
            splats,
            scene,
            frames,
        } => commands::bench(&splats, &scene, frames).map(drop),
        Command::Synth { spec, out, seed } => commands::synth(spec.as_deref(), &out, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
