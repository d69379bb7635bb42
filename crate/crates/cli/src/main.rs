//! Command-line front end for the irregularity detection pipeline.
//!
//! Each pipeline stage is a subcommand operating on files, so stages can be
//! rerun and inspected in isolation; `run` chains them from a TOML config.

use clap::{Args, Parser, Subcommand};
use irregular_core::dataset::load_dataset;
use irregular_core::detector::TrainConfig;
use irregular_core::error::{Error, ErrorClass};
use irregular_core::pipeline::{
    detect_train_stage, eval_stage, gp_fit_stage, run_pipeline, score_proposals_stage,
    score_stage, synth_stage, GpFitOptions, Method, PipelineConfig, ScoreOptions,
};
use irregular_core::synth::SynthConfig;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_HELP: &str = "exit codes:
  0  success
  2  command-line usage error
  3  i/o failure (missing or unwritable file)
  4  malformed data (parse errors, dimension or id violations)
  5  protocol violation (bad splits, empty training sides, degenerate labels)
  6  numerical failure (covariance not factorizable)";

#[derive(Parser)]
#[command(name = "irregular", version, about = "Irregular object identification from detection score distributions", after_help = EXIT_HELP)]
struct Cli {
    /// Worker threads for image-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
}

impl From<TrainArgs> for TrainConfig {
    fn from(a: TrainArgs) -> Self {
        TrainConfig {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            batch_size: a.batch_size,
            seed: a.train_seed,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset (JSON-lines).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        images_per_status: usize,
        #[arg(long, default_value_t = 40)]
        proposals_per_image: usize,
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        #[arg(long, default_value_t = 0.35)]
        score_noise: f64,
        #[arg(long, default_value_t = 0.5)]
        irregular_flip_fraction: f64,
    },
    /// Train the region-level detector on the train split.
    DetectTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Fill every proposal score using a trained detector.
    ScoreProposals {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the regular and other-class GP models from a scored dataset.
    GpFit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_regular: PathBuf,
        #[arg(long)]
        out_other: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_n: usize,
        #[arg(long, default_value_t = 100)]
        max_train_images: usize,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score the test split with one method.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_n: usize,
        /// Fitted model files (gp method only).
        #[arg(long)]
        model_regular: Option<PathBuf>,
        #[arg(long)]
        model_other: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate score files; emits a JSON report and a text table.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Score files as `name=path`; repeatable.
        #[arg(long = "scores", required = true)]
        scores: Vec<String>,
        /// Classes to evaluate (default: all present in the test split).
        #[arg(long)]
        class: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
        /// Directory for per-class ROC point CSVs.
        #[arg(long)]
        roc_dir: Option<PathBuf>,
    },
    /// Run every stage from a config file (flags override config keys).
    Run {
        /// TOML pipeline config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Existing dataset to use instead of generating one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        max_train_images: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_scores_arg(args: &[String]) -> Result<Vec<(String, PathBuf)>, String> {
    args.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(name, path)| (name.to_string(), PathBuf::from(path)))
                .ok_or_else(|| format!("--scores expects name=path, got `{s}`"))
        })
        .collect()
}

fn exit_code_for(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Io => 3,
        ErrorClass::Data => 4,
        ErrorClass::Protocol => 5,
        ErrorClass::Numerics => 6,
    }
}

fn with_jobs<T>(
    jobs: usize,
    f: impl FnOnce() -> irregular_core::Result<T> + Send,
) -> irregular_core::Result<T>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::ModelFormat(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn execute(cli: Cli) -> irregular_core::Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            images_per_status,
            proposals_per_image,
            feature_dim,
            score_noise,
            irregular_flip_fraction,
        } => {
            let cfg = SynthConfig {
                seed,
                images_per_status,
                proposals_per_image,
                feature_dim,
                score_noise,
                irregular_flip_fraction,
                ..SynthConfig::default()
            };
            let manifest = synth_stage(&cfg, &out)?;
            log::info!("wrote {} records to {}", manifest.records.len(), out.display());
            Ok(())
        }
        Command::DetectTrain { dataset, out, train } => {
            detect_train_stage(&dataset, &train.into(), &out)
        }
        Command::ScoreProposals {
            dataset,
            detector,
            out,
        } => with_jobs(cli.jobs, || score_proposals_stage(&dataset, &detector, &out)),
        Command::GpFit {
            dataset,
            out_regular,
            out_other,
            top_n,
            max_train_images,
            max_iters,
            seed,
        } => {
            let opts = GpFitOptions {
                top_n,
                max_train_images,
                max_iters,
                seed,
            };
            gp_fit_stage(&dataset, &opts, &out_regular, &out_other)
        }
        Command::Score {
            dataset,
            method,
            out,
            top_n,
            model_regular,
            model_other,
            train,
        } => {
            let opts = ScoreOptions {
                method,
                top_n,
                model_regular,
                model_other,
                train: train.into(),
            };
            with_jobs(cli.jobs, || score_stage(&dataset, &opts, &out).map(|_| ()))
        }
        Command::Eval {
            dataset,
            scores,
            class,
            report,
            table,
            roc_dir,
        } => {
            let score_files =
                parse_scores_arg(&scores).map_err(|msg| Error::ModelFormat(msg))?;
            // fail early with a named id if the dataset is unreadable
            load_dataset(&dataset)?;
            eval_stage(
                &dataset,
                &score_files,
                &class,
                &report,
                table.as_deref(),
                roc_dir.as_deref(),
            )
            .map(|_| ())
        }
        Command::Run {
            config,
            out_dir,
            dataset,
            method,
            top_n,
            max_train_images,
            seed,
        } => {
            let mut cfg: PipelineConfig = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    toml::from_str(&text).map_err(|e| Error::ModelFormat(e.to_string()))?
                }
                None => PipelineConfig::default(),
            };
            if let Some(v) = out_dir {
                cfg.out_dir = v;
            }
            if let Some(v) = dataset {
                cfg.dataset = Some(v);
            }
            if let Some(v) = method {
                cfg.method = v;
            }
            if let Some(v) = top_n {
                cfg.top_n = v;
            }
            if let Some(v) = max_train_images {
                cfg.max_train_images = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
                cfg.synth.seed = v;
                cfg.train.seed = v;
            }
            cfg.jobs = cli.jobs;
            let report = run_pipeline(&cfg)?;
            println!(
                "method {}: mAP {:.4}",
                cfg.method,
                report.map
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
