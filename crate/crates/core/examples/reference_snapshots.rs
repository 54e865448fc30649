//! Ground truth by the method of characteristics and synthetic snapshots.
//!
//! Writes the raw measurements as CSV to the given path (default
//! `snapshots_raw.csv`).
//!
//! Usage: `cargo run --release --example reference_snapshots [out.csv]`

use std::fs::File;
use std::io::BufWriter;

use cellpop::gmd::Gmd;
use cellpop::models::ModelSpec;
use cellpop::ode::IntegratorConfig;
use cellpop::reference::{generate_snapshots, simulate_reference, NoiseModel, SnapshotPlan};
use cellpop::rng::{substream, Purpose};
use nalgebra::{dmatrix, dvector};

fn main() -> cellpop::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "snapshots_raw.csv".into());
    let model = ModelSpec::gene_expr3d_default();
    let n0 = Gmd::single(
        dvector![1.0, 1.0, 2.0],
        dmatrix![0.1, 0.0, 0.0; 0.0, 0.1, 0.0; 0.0, 0.0, 0.1],
    )?;
    let times: Vec<f64> = (0..=60).map(|k| k as f64 * 0.33).collect();
    let ensembles = simulate_reference(
        &model,
        &n0,
        1000,
        &times,
        &IntegratorConfig::default(),
        &mut substream(3, 0, Purpose::Reference),
    )?;
    let plan = SnapshotPlan {
        n_meas: 300,
        noise: NoiseModel::MultiplicativeLogNormal { variance: 0.01 },
        n_gmd: 3,
        em_max_iter: 400,
    };
    let snaps = generate_snapshots(
        &ensembles,
        &model,
        &plan,
        &mut substream(3, 0, Purpose::Snapshots),
    )?;
    println!(
        "{:>6} {:>10} {:>10} {:>12}",
        "t", "mean z2", "mean k1", "fit mean z2"
    );
    for k in [0, 10, 30, 60] {
        let z2 = ensembles[k].coordinate(1);
        let k1 = ensembles[k].coordinate(2);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:>6.2} {:>10.4} {:>10.4} {:>12.4}",
            ensembles[k].time,
            mean(&z2),
            mean(&k1),
            snaps.entries[k].gmd.mean()[0]
        );
    }
    snaps.write_raw_csv(BufWriter::new(File::create(&out)?))?;
    println!("raw measurements written to {out}");
    Ok(())
}
