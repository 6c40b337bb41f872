//! Command-line driver: synthesize data, train, detect, evaluate and inspect.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vcvote::concepts::Method;
use vcvote::pipeline::config::PipelineConfig;
use vcvote::pipeline::run;
use vcvote::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "vcvote", version, about = "Visual concept learning and part detection by voting")]
struct Cli {
    /// Pipeline configuration (TOML, or JSON with a .json extension).
    #[arg(short, long, global = true, default_value = "vcvote.toml")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the configured count or all cores.
    #[arg(short, long, global = true)]
    workers: Option<usize>,
    /// Override the model directory.
    #[arg(long, global = true)]
    models: Option<PathBuf>,
    /// Override the report directory.
    #[arg(long, global = true)]
    reports: Option<PathBuf>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Kmeans,
    Vmf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world with annotated training scenes.
    Synth,
    /// Learn concepts, spatial models, evidence and voters.
    Train {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Initial number of concepts.
        #[arg(short = 'k', long)]
        k: Option<usize>,
        /// Davies-Bouldin merge threshold.
        #[arg(long)]
        db_threshold: Option<f64>,
    },
    /// Detect parts on feature map files and print JSON lines.
    Detect {
        /// Feature map files (.fmap).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Treat the inputs as scales of one image and pool across them.
        #[arg(long)]
        pyramid: bool,
        /// Write detections here instead of standard output.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run the occlusion benchmark and concept analyses.
    Eval {
        /// Evaluate even if the models were trained from other settings or inputs.
        #[arg(long)]
        allow_stale: bool,
    },
    /// Sparse-encode the training maps and report activation counts.
    Encode {
        /// Activation threshold for the written codes.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print a JSON summary of the trained models.
    Inspect {
        /// Also show this concept's model for `--part`.
        #[arg(long, requires = "part")]
        concept: Option<usize>,
        #[arg(long, requires = "concept")]
        part: Option<usize>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(m) = &cli.models {
        cfg.paths.models = m.clone();
    }
    if let Some(r) = &cli.reports {
        cfg.paths.reports = r.clone();
    }
    if let Command::Train { method, k, db_threshold } = &cli.command {
        if let Some(m) = method {
            cfg.train.method = match m {
                MethodArg::Kmeans => Method::Kmeans,
                MethodArg::Vmf => Method::Vmf,
            };
        }
        if let Some(k) = k {
            cfg.train.k = *k;
        }
        if db_threshold.is_some() {
            cfg.train.db_threshold = *db_threshold;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("<stdout>", e))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn execute(cli: &Cli, cfg: &PipelineConfig) -> Result<()> {
    match &cli.command {
        Command::Synth => print_json(&run::run_synth(cfg)?),
        Command::Train { .. } => {
            let manifest = run::run_train(cfg)?;
            print_json(&serde_json::json!({
                "models": cfg.models_dir(),
                "config_hash": manifest.config_hash,
                "concepts": manifest.report.num_concepts,
                "vectors": manifest.report.n_vectors,
            }))
        }
        Command::Detect { inputs, pyramid, output } => {
            let n = match output {
                Some(path) => {
                    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                    let mut w = std::io::BufWriter::new(file);
                    let n = run::run_detect(cfg, inputs, *pyramid, &mut w)?;
                    w.flush().map_err(|e| Error::io(path, e))?;
                    n
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    run::run_detect(cfg, inputs, *pyramid, &mut lock)?
                }
            };
            log::info!("{n} detections");
            Ok(())
        }
        Command::Eval { allow_stale } => {
            let report = run::run_eval(cfg, *allow_stale)?;
            print_json(&serde_json::json!({
                "reports": cfg.reports_dir(),
                "baseline": report.baseline,
                "mean_ap": report.means(),
            }))
        }
        Command::Encode { threshold } => {
            let report = run::run_encode(cfg, *threshold)?;
            print_json(&serde_json::json!({ "crossing": report.crossing, "reports": cfg.reports_dir() }))
        }
        Command::Inspect { concept, part } => print_json(&run::run_inspect(cfg, concept.zip(*part))?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = load_config(&cli).and_then(|cfg| {
        if let Some(n) = cfg.workers {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Argument(format!("cannot start {n} workers: {e}")))?;
        }
        execute(&cli, &cfg)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
