use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellpop::experiment::{
    estimate, run_experiment, simulate, EstimatorKind, ExperimentConfig, RunManifest, MANIFEST_FILE,
};
use cellpop::plot::emit_plots;
use cellpop::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Population density estimation benchmarks.
#[derive(Parser, Debug)]
#[command(name = "cellpop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate reference populations and snapshots only.
    Simulate,
    /// Run estimators on snapshots stored by `simulate`.
    Estimate,
    /// Simulate, estimate, score, and plot.
    Run,
    /// Draw figures for a finished run directory.
    Plot,
    /// Check a config and print its hash.
    ValidateConfig,
}

#[derive(Args, Debug)]
struct Opts {
    /// Config file or builtin name (bench2d, bench3d_clean, bench3d_noisy).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated estimator list, e.g. charest,gridpf.
    #[arg(long, global = true, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    /// Number of repeats, overriding the config.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

const DEFAULT_CONFIG: &str = "bench2d";

fn load_config(opts: &Opts, cmd: &Command) -> Result<ExperimentConfig> {
    let mut cfg = match (&opts.config, &opts.out) {
        (Some(spec), _) => ExperimentConfig::load(spec)?,
        // `estimate` defaults to the config that produced the snapshots.
        (None, Some(out))
            if matches!(cmd, Command::Estimate) && out.join(MANIFEST_FILE).is_file() =>
        {
            RunManifest::read(out)?.config
        }
        (None, _) => ExperimentConfig::builtin(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(n) = opts.repeats {
        cfg.n_repeats = n;
    }
    if let Some(e) = &opts.estimators {
        cfg.estimators = e.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(opts: &Opts, cfg: &ExperimentConfig) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("seed{}", cfg.seed)))
}

fn summarize(m: &RunManifest, dir: &Path) {
    println!("run directory: {}", dir.display());
    println!("config hash:   {}", m.config_hash);
    println!("repeats:       {}", m.repeats.len());
    for (name, secs) in m.total_seconds() {
        println!("{name:<14} {secs:.2} s");
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let opts = &cli.opts;
    match cli.command {
        Command::Plot => {
            let dir = opts
                .out
                .clone()
                .ok_or_else(|| Error::Config("plot needs --out RUN_DIR".into()))?;
            let report = emit_plots(&dir)?;
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            for s in &report.skipped {
                eprintln!("skipped {s}");
            }
            Ok(())
        }
        Command::ValidateConfig => {
            let cfg = load_config(opts, &cli.command)?;
            println!(
                "ok: {} times, {} repeats, estimators {}",
                cfg.times().len(),
                cfg.n_repeats,
                cfg.estimators
                    .iter()
                    .map(|e| e.name())
                    .collect::<Vec<_>>()
                    .join(",")
            );
            println!("hash: {}", cfg.hash());
            Ok(())
        }
        Command::Simulate | Command::Estimate | Command::Run => {
            let cfg = load_config(opts, &cli.command)?;
            let dir = run_dir(opts, &cfg);
            let manifest = match cli.command {
                Command::Simulate => simulate(&cfg, &dir)?,
                Command::Estimate => estimate(&cfg, &dir)?,
                _ => run_experiment(&cfg, &dir)?,
            };
            summarize(&manifest, &dir);
            if !matches!(cli.command, Command::Simulate) {
                let report = emit_plots(&dir)?;
                println!("plots:         {}", report.files.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.opts.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
