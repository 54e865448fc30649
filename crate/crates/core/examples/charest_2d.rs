//! Characteristics-based estimation on the size/growth-rate benchmark.
//!
//! Usage: `cargo run --release --example charest_2d [seed]`

use cellpop::charest::{CharConfig, CharEstimator};
use cellpop::gmd::Gmd;
use cellpop::metrics::l1_gmd_error;
use cellpop::models::ModelSpec;
use cellpop::ode::IntegratorConfig;
use cellpop::reference::{generate_snapshots, simulate_reference, NoiseModel, SnapshotPlan};
use cellpop::rng::{substream, Purpose};
use nalgebra::{dmatrix, dvector};

fn main() -> cellpop::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let model = ModelSpec::growth2d_default();
    let integrator = IntegratorConfig::default();
    let cov = dmatrix![0.1, 0.0; 0.0, 0.01];
    let truth = Gmd::single(dvector![1.5, 0.5], cov.clone())?;
    let guess = Gmd::single(dvector![1.95, 0.65], cov * 1.5)?;
    let times: Vec<f64> = (0..=60).map(|k| k as f64 * 0.33).collect();

    let ensembles = simulate_reference(
        &model,
        &truth,
        1000,
        &times,
        &integrator,
        &mut substream(seed, 0, Purpose::Reference),
    )?;
    let plan = SnapshotPlan {
        n_meas: 300,
        noise: NoiseModel::AdditiveGaussian { variance: 0.01 },
        n_gmd: 3,
        em_max_iter: 500,
    };
    let snaps = generate_snapshots(
        &ensembles,
        &model,
        &plan,
        &mut substream(seed, 0, Purpose::Snapshots),
    )?;

    let est = CharEstimator::new(model, CharConfig::bench2d(), integrator)?;
    let mut rng = substream(seed, 0, Purpose::Charest);
    let start = std::time::Instant::now();
    let mut state = est.init(&guess, 0.0, &mut rng)?;
    let mut resamples = 0;
    println!(
        "{:>6} {:>8} {:>8} {:>8} resampled",
        "t", "L1(z)", "L1(g)", "kl"
    );
    for (k, entry) in snaps.entries.iter().enumerate() {
        if k > 0 {
            let rec = est.step(&mut state, entry.t, &entry.gmd, &mut rng)?;
            resamples += rec.resampled as usize;
        }
        if k % 6 == 0 || k == snaps.entries.len() - 1 {
            let ez = l1_gmd_error(&state.posterior_gmd, &ensembles[k], 0)?;
            let eg = l1_gmd_error(&state.posterior_gmd, &ensembles[k], 1)?;
            println!(
                "{:>6.2} {ez:>8.4} {eg:>8.4} {:>8.4} {}",
                entry.t, state.last_kl, state.resampled
            );
        }
    }
    println!(
        "{} resamples, {} ODE solves, {:.2?}",
        resamples,
        state.ode_solves,
        start.elapsed()
    );
    Ok(())
}
