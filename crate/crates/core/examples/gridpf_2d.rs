//! Grid particle filter on the size/growth-rate benchmark.
//!
//! Usage: `cargo run --release --example gridpf_2d [seed] [nz ng particles]`

use cellpop::gmd::Gmd;
use cellpop::gridpf::{Grid, GridPf, PfConfig};
use cellpop::metrics::{l1_marginal_error, QUAD_NODES};
use cellpop::models::ModelSpec;
use cellpop::ode::IntegratorConfig;
use cellpop::reference::{generate_snapshots, simulate_reference, NoiseModel, SnapshotPlan};
use cellpop::rng::{substream, Purpose};
use nalgebra::{dmatrix, dvector};

fn main() -> cellpop::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|s| s.parse().ok())
        .collect();
    let seed = args.first().copied().unwrap_or(1);
    let (nz, ng, np) = match args.as_slice() {
        [_, nz, ng, np, ..] => (*nz as usize, *ng as usize, *np as usize),
        _ => (80, 30, 120),
    };
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

    let cfg = PfConfig {
        n_particles: np,
        ..PfConfig::default()
    };
    let pf = GridPf::new(&model, Grid::growth2d(nz, ng)?, cfg, integrator)?;
    println!(
        "{} nodes, {} operator nonzeros, {} boundary violations",
        pf.grid().n_nodes(),
        pf.advection().matrix.nnz(),
        pf.advection().boundary_violations
    );
    let mut rng = substream(seed, 0, Purpose::GridPf);
    let start = std::time::Instant::now();
    let mut state = pf.init(&guess, 0.0, &mut rng)?;
    let mut resamples = 0;
    println!("{:>6} {:>8} {:>8} {:>8}", "t", "L1(z)", "L1(g)", "n_eff");
    for (k, entry) in snaps.entries.iter().enumerate() {
        let n_eff = if k > 0 {
            let rec = pf.step(&mut state, entry.t, &entry.gmd, &mut rng)?;
            resamples += rec.resampled as usize;
            rec.n_eff
        } else {
            state.n_eff()
        };
        if k % 6 == 0 || k == snaps.entries.len() - 1 {
            let ez = l1_marginal_error(
                &pf.estimate_marginal(&state, 0)?,
                &ensembles[k],
                0,
                QUAD_NODES,
            )?;
            let eg = l1_marginal_error(
                &pf.estimate_marginal(&state, 1)?,
                &ensembles[k],
                1,
                QUAD_NODES,
            )?;
            println!("{:>6.2} {ez:>8.4} {eg:>8.4} {n_eff:>8.2}", entry.t);
        }
    }
    println!("{resamples} resamples, {:.2?}", start.elapsed());
    Ok(())
}
