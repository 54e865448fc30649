//! Both estimators on identical snapshots of the size/growth-rate benchmark.
//!
//! Usage: `cargo run --release --example compare_estimators [seed]`

use cellpop::experiment::{
    error_series, run_estimator, simulate_repeat, EstimatorKind, ExperimentConfig,
};

fn main() -> cellpop::Result<()> {
    let mut cfg = ExperimentConfig::builtin("bench2d")?;
    if let Some(seed) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.seed = seed;
    }
    let data = simulate_repeat(&cfg, 0)?;
    let mut seconds = Vec::new();
    println!(
        "{:>8} {:>9} {:>9} {:>9}",
        "", "avg L1 z", "avg L1 g", "seconds"
    );
    for kind in [EstimatorKind::Charest, EstimatorKind::Gridpf] {
        let run = run_estimator(&cfg, kind, 0, &data.snapshots)?;
        let errs = error_series(&cfg.model, &run, &data.ensembles, cfg.seed)?;
        println!(
            "{kind:>8} {:>9.4} {:>9.4} {:>9.3}",
            errs[0].time_average(),
            errs[1].time_average(),
            run.seconds
        );
        seconds.push(run.seconds);
    }
    println!(
        "wall-clock ratio gridpf / charest: {:.1}",
        seconds[1] / seconds[0]
    );
    Ok(())
}
