use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereopaint::app::{self, EvalArgs, EvalMethod, InferArgs};
use stereopaint::config::RunConfig;
use stereopaint::data::MaskBucket;
use stereopaint::gaa::AggregationMode;

#[derive(Parser)]
#[command(name = "stereopaint", version, about = "Stereo image inpainting with geometry-aware attention")]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test stereo dataset.
    GenData(RunFlags),
    /// Train a model on the generated training split.
    Train(RunFlags),
    /// Restore one stereo pair with a trained model.
    Infer(InferFlags),
    /// Score a model (or a baseline) on a dataset split, per mask bucket.
    Eval(EvalFlags),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args, Default)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_disp: Option<usize>,
    /// Cost-volume disparity levels.
    #[arg(long)]
    d_levels: Option<usize>,
    /// Cross-guidance iterations (even).
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda_adv: Option<f32>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    disc_learning_rate: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    /// Per-network gradient norm cap, 0 disables.
    #[arg(long)]
    clip_norm: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// gaa, max or concat.
    #[arg(long)]
    ablation: Option<AggregationMode>,
    /// b0_20, b20_40 or b40_60.
    #[arg(long)]
    bucket: Option<MaskBucket>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl RunFlags {
    fn apply(self, c: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            seed, height, width, max_disp, d_levels, iterations, lambda_adv, learning_rate,
            disc_learning_rate, momentum, clip_norm, epochs, batch_size, ablation, bucket,
            train_count, test_count, dataset_dir, checkpoint, out_dir
        );
    }
}

#[derive(Args)]
struct InferFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    mask_left: PathBuf,
    #[arg(long)]
    mask_right: PathBuf,
    /// Defaults to the value stored in the checkpoint.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset split directory; defaults to `<dataset_dir>/test`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated buckets; defaults to all three.
    #[arg(long, value_delimiter = ',')]
    buckets: Vec<MaskBucket>,
    /// model, zero_fill or ground_truth.
    #[arg(long, default_value = "model")]
    method: EvalMethod,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("STEREOPAINT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("STEREOPAINT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let rt = |e: stereopaint::Error| Failure::Runtime(e.to_string());
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenData(flags) => {
            flags.apply(&mut cfg);
            stereopaint::data::check_geometry(cfg.height, cfg.width, cfg.max_disp)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            app::cmd_gen_data(&cfg, &mut out).map_err(rt)?;
        }
        Command::Train(flags) => {
            flags.apply(&mut cfg);
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            app::cmd_train(&cfg, &mut out).map_err(rt)?;
        }
        Command::Infer(f) => {
            let args = InferArgs {
                checkpoint: f.checkpoint.unwrap_or(cfg.checkpoint),
                left: f.left,
                right: f.right,
                mask_left: f.mask_left,
                mask_right: f.mask_right,
                iterations: f.iterations,
                out_dir: f.out_dir.unwrap_or(cfg.out_dir),
            };
            app::cmd_infer(&args, &mut out).map_err(rt)?;
        }
        Command::Eval(f) => {
            let args = EvalArgs {
                checkpoint: f.checkpoint.unwrap_or_else(|| cfg.checkpoint.clone()),
                dataset: f.dataset.unwrap_or_else(|| cfg.test_dir()),
                buckets: if f.buckets.is_empty() {
                    MaskBucket::ALL.to_vec()
                } else {
                    f.buckets
                },
                method: f.method,
                iterations: f.iterations,
                out_dir: Some(f.out_dir.unwrap_or(cfg.out_dir)),
            };
            app::cmd_eval(&args, &mut out).map_err(rt)?;
        }
        Command::Gradcheck => {
            if !app::cmd_gradcheck(&mut out).map_err(rt)? {
                return Err(Failure::Runtime("gradient check failed".into()));
            }
        }
    }
    out.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
