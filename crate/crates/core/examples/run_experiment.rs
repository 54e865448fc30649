//! End-to-end run of a shipped scenario: files, manifest, and figures.
//!
//! Usage: `cargo run --release --example run_experiment [config] [out_dir]`

use std::path::PathBuf;

use cellpop::experiment::{run_experiment, ExperimentConfig};
use cellpop::plot::emit_plots;

fn main() -> cellpop::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "bench2d".into());
    let out = PathBuf::from(
        args.next()
            .unwrap_or_else(|| format!("runs/example-{name}")),
    );
    let mut cfg = ExperimentConfig::load(&name)?;
    cfg.n_repeats = cfg.n_repeats.min(2);
    let manifest = run_experiment(&cfg, &out)?;
    println!("config hash {}", manifest.config_hash);
    for (est, secs) in manifest.total_seconds() {
        println!("{est}: {secs:.2} s over {} repeats", manifest.repeats.len());
    }
    let report = emit_plots(&out)?;
    for f in manifest.files.iter().filter(|f| !f.contains('/')) {
        println!("  {f}");
    }
    println!(
        "{} figures in {}",
        report.files.len(),
        out.join("plots").display()
    );
    Ok(())
}
