use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ocm_lrcn::evalbench::BenchConfig;
use ocm_lrcn::lrcn::ArchSpec;
use ocm_lrcn::pipeline::{self, BenchOptions, EvalOptions, PhantomSpec, Split, TrainOptions};
use ocm_lrcn::train::{TargetNormalization, TrainConfig};
use ocm_lrcn::Error;

/// Synthetic MR-like images from single-element ultrasound traces.
#[derive(Parser)]
#[command(name = "ocm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic breathing phantom: traces, images and a manifest.
    Phantom(PhantomArgs),
    /// Fit the PCA and train the network on the training split.
    Train(TrainArgs),
    /// Reconstruct one image per selected trace.
    Infer(InferArgs),
    /// Score predictions on the test split, or compare two image files.
    Eval(EvalArgs),
    /// Fit the kernel-regression baseline and predict a split.
    Kde(KdeArgs),
    /// Per-query latency of both predictors over a sweep of database sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = pipeline::DEFAULT_DURATION_S)]
    duration_s: f64,
    #[arg(long, default_value_t = 1e6)]
    f0_hz: f64,
    #[arg(long, default_value_t = 4.0)]
    breathing_period_s: f64,
    /// Trace noise level; omit the noise entirely with --noiseless.
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = pipeline::DEFAULT_TRAIN_PAIRS)]
    n_train: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_TEST_PAIRS)]
    n_test: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalization {
    Off,
    PerComponent,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Odd convolution kernel length.
    #[arg(long, default_value_t = 9)]
    kernel_size: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, value_enum, default_value_t = Normalization::Off)]
    target_normalization: Normalization,
    #[arg(long)]
    out_model: PathBuf,
    /// Defaults to the model path with a .metrics.json suffix.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 1)]
    every: usize,
    /// Carry the recurrent state along the stream instead of restarting it per window.
    #[arg(long)]
    stateful: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the PCA coefficients of every frame.
    #[arg(long)]
    coeffs_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    images: PathBuf,
    /// Compare this image file against --images instead of running the split.
    #[arg(long, conflicts_with_all = ["model", "traces", "kde"])]
    pred: Option<PathBuf>,
    #[arg(long, required_unless_present = "pred")]
    traces: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also score the kernel-regression baseline.
    #[arg(long)]
    kde: bool,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = pipeline::DEFAULT_TRAIN_PAIRS)]
    n_train: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_TEST_PAIRS)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Directory for M-mode and difference-image PGM exports.
    #[arg(long)]
    export_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct KdeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Take the PCA and stream settings from a trained model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained model to time; a freshly initialised network otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 400, 800])]
    n_values: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    queries: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> ocm_lrcn::Result<()> {
    match cli.command {
        Command::Phantom(a) => {
            let spec = PhantomSpec {
                seed: a.seed,
                duration_s: a.duration_s,
                f0_hz: a.f0_hz,
                breathing_period_s: a.breathing_period_s,
                snr_db: (!a.noiseless).then_some(a.snr_db),
                ..PhantomSpec::default()
            };
            let files = pipeline::cmd_phantom(&spec, &a.out_dir)?;
            println!(
                "wrote {} traces to {} and {} images to {}",
                files.n_traces,
                files.traces.display(),
                files.n_images,
                files.images.display()
            );
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                config: TrainConfig {
                    lr: a.lr,
                    epochs: a.epochs,
                    batch_size: a.batch_size,
                    seed: a.seed,
                    target_normalization: match a.target_normalization {
                        Normalization::Off => TargetNormalization::Off,
                        Normalization::PerComponent => TargetNormalization::PerComponent,
                    },
                    ..TrainConfig::default()
                },
                arch: ArchSpec {
                    kernel_size: a.kernel_size,
                    dropout_rate: a.dropout,
                    ..ArchSpec::default()
                },
                n_train: a.data.n_train,
                n_test: a.data.n_test,
                ..TrainOptions::default()
            };
            let metrics = a.metrics.unwrap_or_else(|| {
                let mut name = a.out_model.file_name().map(|n| n.to_os_string()).unwrap_or_default();
                name.push(".metrics.json");
                a.out_model.with_file_name(name)
            });
            let quiet = a.quiet;
            let m = pipeline::cmd_train(&a.data.traces, &a.data.images, &opts, &a.out_model, &metrics, |e, l| {
                if !quiet {
                    eprintln!("epoch {:>5}  loss {l:.6e}", e + 1);
                }
            })?;
            println!(
                "trained {} parameters on {} pairs: final loss {:.6e} in {:.1} s",
                m.param_count, m.n_train, m.final_loss, m.timing.wall_time_s
            );
        }
        Command::Infer(a) => {
            let n = pipeline::cmd_infer(&a.model, &a.traces, a.every, a.stateful, &a.out, a.coeffs_csv.as_deref())?;
            println!("wrote {n} frames to {}", a.out.display());
        }
        Command::Eval(a) => {
            if let Some(pred) = &a.pred {
                let s = pipeline::cmd_compare(pred, &a.images, &a.out)?;
                println!("mean SSE {:.6e} over {} images", s.mean, s.per_image.len());
                return Ok(());
            }
            let traces = a.traces.as_deref().ok_or_else(|| Error::InvalidInput("--traces is required".into()))?;
            let opts = EvalOptions {
                n_train: a.n_train,
                n_test: a.n_test,
                with_kde: a.kde,
                bandwidth: a.bandwidth,
                seed: a.seed,
            };
            let r = pipeline::cmd_eval(a.model.as_deref(), traces, &a.images, &opts, &a.out, a.export_dir.as_deref())?;
            println!("mean predictor: SSE {:.6e}", r.mean_predictor.sse_pca.mean);
            if let Some(s) = &r.lrcn {
                println!("network:        SSE {:.6e}", s.sse_pca.mean);
            }
            if let Some(s) = &r.kde {
                println!("kernel reg.:    SSE {:.6e}", s.sse_pca.mean);
            }
        }
        Command::Kde(a) => {
            let opts = EvalOptions {
                n_train: a.data.n_train,
                n_test: a.data.n_test,
                with_kde: true,
                bandwidth: a.bandwidth,
                seed: a.seed,
            };
            let split = match a.split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let r = pipeline::cmd_kde(a.model.as_deref(), &a.data.traces, &a.data.images, &opts, split, &a.out)?;
            println!("bandwidth {:.6e}, mean SSE {:.6e}", r.bandwidth, r.sse_pca.mean);
        }
        Command::Bench(a) => {
            let opts = BenchOptions {
                bench: BenchConfig {
                    n_values: a.n_values,
                    queries: a.queries,
                    repetitions: a.repetitions,
                },
                n_train: a.data.n_train,
                n_test: a.data.n_test,
                bandwidth: a.bandwidth,
                seed: a.seed,
            };
            let r = pipeline::cmd_bench(a.model.as_deref(), &a.data.traces, &a.data.images, &opts, &a.out)?;
            if let Some(fit) = &r.kde_fit {
                println!("kernel regression: slope {:.3e} s/patch, r2 {:.4}", fit.slope, fit.r2);
            }
            if let Some(spread) = r.lrcn_spread {
                println!("network latency spread {spread:.3}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
