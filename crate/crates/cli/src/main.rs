use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mdgs::experiment::{build_id, run, ExperimentConfig};

#[derive(Parser)]
#[command(name = "mdgs", version, about = "Ground-state studies with metric-driven gradient methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study described by a TOML config.
    Run {
        config: PathBuf,
        /// Output directory (default: the config's output.dir, else out/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long, env = "MDGS_THREADS")]
        threads: Option<usize>,
    },
    /// Print the build id written into manifests.
    Version,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("{}", build_id());
            ExitCode::SUCCESS
        }
        Command::Run { config, out, seed, threads } => match run_cmd(config, out, seed, threads) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(2)
            }
        },
    }
}

fn run_cmd(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>, threads: Option<usize>) -> anyhow::Result<bool> {
    let (mut cfg, raw) = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let out = out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    log::info!("{}: {} -> {}", cfg.name, cfg.study.label(), out.display());
    let report = run(&cfg, &raw, &out)?;
    print!("{}", report.to_text());
    println!(
        "{}: {}",
        cfg.name,
        if report.passed() { "all checks passed" } else { "some checks FAILED" }
    );
    Ok(report.passed())
}
