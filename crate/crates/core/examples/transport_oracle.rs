//! Upwind transport of the size/growth-rate NDF against the exact solution.
//!
//! Below the size threshold the model is `dz/dt = g, dg/dt = 0`, so a
//! Gaussian NDF stays Gaussian: `(z, g) -> (z + g t, g)`. One filter step is
//! taken on successively refined grids and the size marginal is compared
//! with the exact push-forward.
//!
//! Usage: `cargo run --release --example transport_oracle`

use cellpop::gmd::Gmd;
use cellpop::gridpf::{build_advection_operator, propagate_particle, Grid};
use cellpop::metrics::{l1_distance, Marginal1d, QUAD_NODES};
use cellpop::models::ModelSpec;
use cellpop::ode::{Dopri5, IntegratorConfig};
use cellpop::rng::seeded;
use nalgebra::{dmatrix, dvector, Matrix2};

fn main() -> cellpop::Result<()> {
    let dt = 0.33;
    let model = ModelSpec::growth2d_default();
    let (mu, cov) = (dvector![1.5, 0.5], dmatrix![0.1, 0.0; 0.0, 0.01]);
    let n0 = Gmd::single(mu.clone(), cov.clone())?;

    let flow = Matrix2::new(1.0, dt, 0.0, 1.0);
    let mu_t = flow * nalgebra::Vector2::new(mu[0], mu[1]);
    let cov_t = flow * Matrix2::new(cov[(0, 0)], 0.0, 0.0, cov[(1, 1)]) * flow.transpose();
    let exact_z = Marginal1d::Mixture(Gmd::single(dvector![mu_t[0]], dmatrix![cov_t[(0, 0)]])?);

    println!("{:>9} {:>10} {:>8}", "grid", "L1(z)", "ratio");
    let mut prev: Option<f64> = None;
    for (nz, ng) in [(60, 22), (120, 45), (240, 90), (480, 180)] {
        let grid = Grid::growth2d(nz, ng)?;
        let adv = build_advection_operator(&model, &grid)?;
        let mut n = grid.discretize(&n0)?.values;
        let mut stepper = Dopri5::new(grid.n_nodes(), IntegratorConfig::default());
        propagate_particle(
            &adv.matrix,
            &grid,
            &mut n,
            dt,
            0.0,
            &mut stepper,
            &mut seeded(0),
        )?;
        let err = l1_distance(&grid.marginal(&n, 0)?, &exact_z, QUAD_NODES)?;
        let ratio = prev.map_or(String::from("-"), |p| format!("{:.2}", p / err));
        println!("{:>9} {err:>10.5} {ratio:>8}", format!("{nz}x{ng}"));
        prev = Some(err);
    }
    Ok(())
}
