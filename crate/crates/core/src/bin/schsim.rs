use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use schsim::harness::{run_study, StudyConfig, StudyKind};
use schsim::Error;

/// Stochastic Cahn-Hilliard studies.
#[derive(Debug, Parser)]
#[command(name = "schsim", version)]
struct Cli {
    /// temporal_rate, spatial_rate, regularity, malliavin_probe, density_study or single_run
    study: String,
    /// JSON study configuration
    #[arg(long)]
    config: PathBuf,
    /// Base seed, overriding the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config (default `out`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sample-level parallelism
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_divergence() {
        3
    } else if e.is_config() {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let kind: StudyKind = cli.study.parse()?;
    let mut cfg = StudyConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let out = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = None;
    let threads = cfg.threads;
    cfg.threads = None;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config {
                field: "threads".into(),
                reason: "must be at least 1".into(),
            });
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Error::Config {
        field: "threads".into(),
        reason: e.to_string(),
    })?;
    pool.install(|| run_study(kind, &cfg, &out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
