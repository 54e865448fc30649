//! Mixture fitting, divergences, and kernel bandwidths.
//!
//! Usage: `cargo run --release --example gmd_fitting`

use cellpop::gmd::{fit_em_with, gaussian_kl_closed_form, kl_mc, scotts_bandwidth, EmConfig, Gmd};
use cellpop::rng::seeded;
use nalgebra::{dmatrix, dvector};

fn main() -> cellpop::Result<()> {
    let mut rng = seeded(7);
    let truth = Gmd::new(
        vec![
            (0.5, dvector![0.0], dmatrix![0.25]),
            (0.5, dvector![4.0], dmatrix![0.25]),
        ],
        1.0,
    )?;
    let pts = truth.sample(5000, &mut rng)?;
    let (fit, report) = fit_em_with(&pts, &EmConfig::new(2, 500), &mut rng)?;
    println!(
        "EM: {} iterations, converged {}, log-likelihood {:.2}",
        report.iterations,
        report.converged,
        report.final_log_likelihood()
    );
    for c in fit.components() {
        println!(
            "  weight {:.3} mean {:.3} var {:.3}",
            c.weight(),
            c.mean()[0],
            c.covariance()[(0, 0)]
        );
    }

    println!("\nKL(p || q): Monte Carlo with 1e5 samples vs closed form");
    let pairs = [
        ((0.0, 1.0), (1.0, 1.0)),
        ((0.0, 1.0), (0.0, 4.0)),
        ((1.0, 0.5), (-1.0, 2.0)),
    ];
    for ((m1, v1), (m2, v2)) in pairs {
        let p = Gmd::single(dvector![m1], dmatrix![v1])?;
        let q = Gmd::single(dvector![m2], dmatrix![v2])?;
        let xs = p.sample(100_000, &mut rng)?;
        println!(
            "  N({m1}, {v1}) vs N({m2}, {v2}): mc {:.4} exact {:.4}",
            kl_mc(&xs, &p, &q)?,
            gaussian_kl_closed_form(&p, &q)?
        );
    }

    let bw = scotts_bandwidth(&pts[..100], 1.0)?;
    println!(
        "\nScott bandwidth (variance) for 100 points: {:.4}",
        bw[(0, 0)]
    );
    Ok(())
}
