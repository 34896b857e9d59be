//! `emoprobe`: layerwise probing, cross-domain adaptation and FAD over
//! cached speech and music embeddings.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed model in an
//! otherwise complete run), 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emoprobe_core::experiment::{self, ExperimentConfig, ModelFailure};
use emoprobe_core::Error;

#[derive(Parser)]
#[command(
    name = "emoprobe",
    version,
    about = "Probe, adapt and compare speech and music embeddings"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one probe per layer and task.
    Probe(RunArgs),
    /// Two-stage fine-tuning grid over approaches and directions.
    Adapt(RunArgs),
    /// Per-layer, per-emotion Fréchet distance between the domains.
    Fad(RunArgs),
    /// Write a synthetic embedding file and its manifest.
    Synth(SynthArgs),
    /// Lint embedding files.
    Validate {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Split and training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated model tags to run (default: all configured).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, env = "EMOPROBE_OUT")]
    out: Option<PathBuf>,
    /// Epochs per training run (per stage for `adapt`).
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic fixture config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "EMOPROBE_OUT", default_value = ".")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(models) = &args.models {
        let models: Vec<String> = models.iter().filter(|m| !m.is_empty()).cloned().collect();
        cfg.select_models(&models)?;
    }
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(epochs) = args.epochs {
        cfg.set_epochs(epochs);
    }
    if let Some(out) = &args.out {
        cfg.output_dir.clone_from(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_failures(failures: &[ModelFailure]) -> Result<(), Failure> {
    for f in failures {
        eprintln!("error: {}: {}", f.model_tag, f.error);
    }
    match failures.len() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!("{n} model run(s) failed"))),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Probe(args) => {
            let cfg = load_config(&args)?;
            let out = experiment::run_probe(&cfg)?;
            for s in &out.summaries {
                let layers: Vec<String> = s.best_layers.iter().map(usize::to_string).collect();
                println!(
                    "{} {}: best {:.4} (layer {}), worst {:.4}, mean {:.4}",
                    s.model_tag,
                    s.task,
                    s.best_ua,
                    layers.join(";"),
                    s.worst_ua,
                    s.mean_ua
                );
            }
            println!("wrote {}", cfg.output_dir.join("probe").display());
            report_failures(&out.failures)
        }
        Command::Adapt(args) => {
            let cfg = load_config(&args)?;
            let out = experiment::run_adapt(&cfg)?;
            let mut failed = out.failures;
            for r in &out.rows {
                match &r.error {
                    Some(e) => failed.push(ModelFailure {
                        model_tag: format!("{} {} {}->{}", r.model_tag, r.approach, r.source_task, r.target_task),
                        error: e.clone(),
                    }),
                    None => println!(
                        "{} {} {}->{}: {:.4} -> {:.4}",
                        r.model_tag,
                        r.approach,
                        r.source_task,
                        r.target_task,
                        r.stage_one_ua.unwrap_or(f64::NAN),
                        r.stage_two_ua.unwrap_or(f64::NAN)
                    ),
                }
            }
            println!("wrote {}", cfg.output_dir.join("adapt").display());
            report_failures(&failed)
        }
        Command::Fad(args) => {
            let cfg = load_config(&args)?;
            let out = experiment::run_fad(&cfg)?;
            let cells_failed = out.rows.iter().filter(|r| r.error.is_some()).count();
            if cells_failed > 0 {
                eprintln!("warning: {cells_failed} FAD cell(s) could not be computed");
            }
            println!("{} FAD rows", out.rows.len());
            println!("wrote {}", cfg.output_dir.join("fad").display());
            report_failures(&out.failures)
        }
        Command::Synth(args) => {
            let out = experiment::run_synth(&args.config, args.seed, &args.out)?;
            println!(
                "wrote {} records to {} and {}",
                out.record_count,
                out.embeddings.display(),
                out.manifest.display()
            );
            Ok(())
        }
        Command::Validate { paths } => {
            let mut dirty = 0;
            for path in &paths {
                let report = experiment::validate(path);
                println!(
                    "{}: {} records, {} layers, dim {}",
                    path.display(),
                    report.record_count,
                    report.num_layers,
                    report.dim
                );
                for (stratum, n) in &report.counts {
                    println!("  {stratum}: {n}");
                }
                for e in &report.errors {
                    println!("  error: {e}");
                }
                if !report.is_clean() {
                    dirty += 1;
                }
            }
            match dirty {
                0 => Ok(()),
                n => Err(Failure::Runtime(format!("{n} file(s) failed validation"))),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
