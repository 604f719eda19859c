use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use scalecl::harness::{
    benchmark_sampling, collect_embeddings, evaluate, gradient_suite, make_splits, run_training, write_embeddings_csv,
    BenchConfig, BenchShape, Checkpoint, RunConfig, RunOutputs, Trainer,
};
use scalecl::mem::TrackingAllocator;
use scalecl::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

/// Thread count for the compute pool; unset means one per core.
const THREADS_ENV: &str = "SCALECL_THREADS";

#[derive(Parser)]
#[command(name = "scalecl", version, about = "Multi-scale contrastive segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report mIoU of a checkpoint on the validation split of a config.
    Eval {
        ckpt: PathBuf,
        config: PathBuf,
        /// Evaluate on the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Write normalized projected embeddings as CSV.
    ExportEmbeddings {
        ckpt: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dense versus sampled loss cost.
    Benchmark {
        /// Comma-separated `BxHxW` feature shapes.
        #[arg(long, value_delimiter = ',', default_value = "1x16x16,2x16x16,2x32x32,2x64x64")]
        shapes: Vec<BenchShape>,
        #[arg(long, default_value_t = 2048)]
        a_max: usize,
        /// Dense mode is skipped above this many pairs.
        #[arg(long, default_value_t = 1 << 25)]
        pair_ceiling: u64,
    },
    /// Finite-difference check of every loss term and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn run(cli: Cli) -> Result<(), Error> {
    init_threads()?;
    match cli.command {
        Command::Train { config, resume, out } => {
            let cfg = RunConfig::load(&config)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    if ckpt.config_hash != cfg.hash()? {
                        return Err(Error::Config("checkpoint was written with a different config".into()));
                    }
                    Trainer::from_checkpoint(ckpt)?
                }
                None => Trainer::new(cfg.clone())?,
            };
            let outputs = RunOutputs {
                dir: out.unwrap_or_else(|| cfg.output_dir.clone()),
            };
            let outcome = run_training(&mut trainer, Some(&outputs))?;
            print_json(&json!({
                "steps": outcome.checkpoint.step,
                "checkpoint": outputs.last(),
                "metrics": outputs.metrics(),
                "eval": outcome.final_eval,
            }));
        }
        Command::Eval {
            ckpt,
            config,
            train_split,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = RunConfig::load(&config)?;
            if cfg.n_classes() != ckpt.config.n_classes() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint has {} classes, dataset {}",
                    ckpt.config.n_classes(),
                    cfg.n_classes()
                )));
            }
            let model = ckpt.model()?;
            let splits = make_splits(&cfg.dataset)?;
            let scene = if train_split { &splits.train } else { &splits.val };
            let report = evaluate(&model, scene, &cfg.rare_classes())?;
            print_json(&serde_json::to_value(report).map_err(|e| Error::Io(e.into()))?);
        }
        Command::ExportEmbeddings {
            ckpt,
            config,
            scale,
            per_class,
            out,
            seed,
        } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let cfg = RunConfig::load(&config)?;
            let model = ckpt.model()?;
            let splits = make_splits(&cfg.dataset)?;
            let rows = collect_embeddings(&model, &splits.val, scale, per_class, seed)?;
            let dim = model.spec().embedding_dim;
            match out {
                Some(path) => write_embeddings_csv(&rows, dim, std::io::BufWriter::new(std::fs::File::create(path)?))?,
                None => write_embeddings_csv(&rows, dim, std::io::stdout().lock())?,
            }
        }
        Command::Benchmark {
            shapes,
            a_max,
            pair_ceiling,
        } => {
            let cfg = BenchConfig {
                shapes,
                a_max,
                dense_pair_ceiling: pair_ceiling,
                ..BenchConfig::default()
            };
            let rows = benchmark_sampling(&cfg)?;
            print_json(&serde_json::to_value(rows).map_err(|e| Error::Io(e.into()))?);
        }
        Command::Gradcheck { instances, seed } => {
            let started = std::time::Instant::now();
            let reports = gradient_suite(instances, seed)?;
            let mut failed = 0;
            for r in &reports {
                let tag = if r.passed() { "PASS" } else { "FAIL" };
                eprintln!("[{tag}] {r}");
                failed += usize::from(!r.passed());
            }
            eprintln!("{} checks in {:.1}s", reports.len(), started.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = json!({ "error": { "kind": "usage", "message": e.to_string().trim_end() } });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
