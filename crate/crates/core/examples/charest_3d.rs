//! Characteristics-based estimation on the gene-expression benchmark, with
//! and without measurement noise.
//!
//! Usage: `cargo run --release --example charest_3d [repeats]`

use cellpop::experiment::{
    error_series, run_estimator, simulate_repeat, EstimatorKind, ExperimentConfig,
};

fn main() -> cellpop::Result<()> {
    let repeats: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    for name in ["bench3d_clean", "bench3d_noisy"] {
        let cfg = ExperimentConfig::builtin(name)?;
        let dims = cfg.model.dim_names();
        let mut first = vec![0.0; dims.len()];
        let mut last = vec![0.0; dims.len()];
        let mut avg = vec![0.0; dims.len()];
        for i in 0..repeats {
            let data = simulate_repeat(&cfg, i)?;
            let run = run_estimator(&cfg, EstimatorKind::Charest, i, &data.snapshots)?;
            for (d, s) in error_series(&cfg.model, &run, &data.ensembles, i as u64)?
                .iter()
                .enumerate()
            {
                first[d] += s.first() / repeats as f64;
                last[d] += s.last() / repeats as f64;
                avg[d] += s.time_average() / repeats as f64;
            }
        }
        println!("{name}, mean L1 over {repeats} repeats");
        for (d, n) in dims.iter().enumerate() {
            println!(
                "  {n:>3}: t=0 {:.3}  t_end {:.3}  time-average {:.3}",
                first[d], last[d], avg[d]
            );
        }
    }
    Ok(())
}
