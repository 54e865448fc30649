//! Single-cell trajectories of both benchmark models.
//!
//! Usage: `cargo run --release --example ode_models`

use cellpop::models::ModelSpec;
use cellpop::ode::IntegratorConfig;
use nalgebra::dvector;

fn main() -> cellpop::Result<()> {
    let cfg = IntegratorConfig::default();

    let growth = ModelSpec::growth2d_default();
    println!("growth2d from (z, g) = (1.5, 0.5)");
    println!("{:>6} {:>9} {:>9}", "t", "z", "g");
    let x0 = dvector![1.5, 0.5];
    for t in [0.0, 2.0, 4.0, 6.0, 10.0, 20.0] {
        let x = growth.integrate(&x0, 0.0, t, &cfg)?;
        println!("{t:>6.1} {:>9.5} {:>9.5}", x[0], x[1]);
    }

    let gene = ModelSpec::gene_expr3d_default();
    println!("\ngene_expr3d from (z1, z2, k1) = (1, 1, 2); fixed point (k1, 2 k1)");
    println!("{:>6} {:>9} {:>9} {:>9}", "t", "z1", "z2", "k1");
    let x0 = dvector![1.0, 1.0, 2.0];
    for t in [0.0, 1.0, 2.0, 5.0, 10.0] {
        let x = gene.integrate(&x0, 0.0, t, &cfg)?;
        println!("{t:>6.1} {:>9.5} {:>9.5} {:>9.5}", x[0], x[1], x[2]);
    }
    println!(
        "measured output at the end: {:?}",
        gene.measure(&gene.integrate(&x0, 0.0, 10.0, &cfg)?)
            .as_slice()
    );
    Ok(())
}
