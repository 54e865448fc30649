//! Grid-based particle filter over a finite-volume discretization of the
//! population balance equation.
//!
//! Each particle is a whole discretized NDF. Particles are transported by
//! the linear upwind operator `A`, perturbed multiplicatively in log space,
//! and weighted by how well their measured marginal `C n` matches the
//! measured density evaluated on the grid.

mod sparse;

pub use sparse::CsrMatrix;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmd::Gmd;
use crate::metrics::Marginal1d;
use crate::models::ModelSpec;
use crate::ode::{Dopri5, IntegratorConfig, OdeSystem};
use crate::rng::child;

/// Floor applied before taking logarithms of densities.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(lower: f64, upper: f64, nodes: usize) -> Result<Self> {
        let a = Self {
            lower,
            upper,
            nodes,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::Config(format!(
                "grid axis bounds [{}, {}] are invalid",
                self.lower, self.upper
            )));
        }
        if self.nodes < 2 {
            return Err(Error::Config("grid axes need at least 2 nodes".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.nodes as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.center(i)).collect()
    }
}

/// Tensor-product grid of equal cells. Flat indices run with the last axis
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Axis>", into = "Vec<Axis>")]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
}

impl TryFrom<Vec<Axis>> for Grid {
    type Error = Error;
    fn try_from(axes: Vec<Axis>) -> Result<Self> {
        Grid::new(axes)
    }
}

impl From<Grid> for Vec<Axis> {
    fn from(g: Grid) -> Self {
        g.axes
    }
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Config("a grid needs at least one axis".into()));
        }
        for a in &axes {
            a.validate()?;
        }
        let mut strides = vec![1; axes.len()];
        for d in (0..axes.len() - 1).rev() {
            strides[d] = strides[d + 1] * axes[d + 1].nodes;
        }
        Ok(Self { axes, strides })
    }

    /// Size/growth-rate grid with `nz x ng` nodes.
    pub fn growth2d(nz: usize, ng: usize) -> Result<Self> {
        Self::new(vec![Axis::new(0.0, 7.0, nz)?, Axis::new(0.0, 1.2, ng)?])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (d, s) in self.strides.iter().enumerate() {
            idx[d] = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn center(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.center(i))
            .collect()
    }

    /// Sub-grid spanned by the axes in `dims`.
    pub fn subgrid(&self, dims: &[usize]) -> Result<Grid> {
        check_dims(dims, self.dim())?;
        Grid::new(dims.iter().map(|&d| self.axes[d]).collect())
    }

    /// Mass `sum(n) * volume`.
    pub fn mass(&self, values: &[f64]) -> f64 {
        values.iter().sum::<f64>() * self.cell_volume()
    }

    /// Rescales `values` to unit mass.
    pub fn normalize(&self, values: &mut [f64]) -> Result<()> {
        let m = self.mass(values);
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::invalid(format!(
                "cannot normalize a density of mass {m}"
            )));
        }
        values.iter_mut().for_each(|v| *v /= m);
        Ok(())
    }

    /// Cell-center samples of `density`, normalized to unit mass.
    pub fn discretize(&self, density: &Gmd) -> Result<GridNdf> {
        if density.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: density.dim(),
            });
        }
        let mut values: Vec<f64> = (0..self.n_nodes())
            .into_par_iter()
            .map(|i| density.pdf(&self.center(i)))
            .collect();
        self.normalize(&mut values)
            .map_err(|_| Error::invalid("density has no mass on the grid"))?;
        Ok(GridNdf { values })
    }

    /// One-dimensional marginal along `dim` as a piecewise-constant density.
    pub fn marginal(&self, values: &[f64], dim: usize) -> Result<Marginal1d> {
        if dim >= self.dim() {
            return Err(Error::invalid(format!("dimension {dim} out of range")));
        }
        let axis = self.axes[dim];
        let other: f64 = self.cell_volume() / axis.width();
        let mut out = vec![0.0; axis.nodes];
        for (flat, v) in values.iter().enumerate() {
            out[(flat / self.strides[dim]) % axis.nodes] += v * other;
        }
        Ok(Marginal1d::Piecewise {
            lo: axis.lower,
            width: axis.width(),
            values: out,
        })
    }
}

fn check_dims(dims: &[usize], d: usize) -> Result<()> {
    let mut seen = vec![false; d];
    for &i in dims {
        if i >= d || seen[i] {
            return Err(Error::invalid(format!("invalid dimension list {dims:?}")));
        }
        seen[i] = true;
    }
    if dims.is_empty() {
        return Err(Error::invalid("dimension list is empty"));
    }
    Ok(())
}

/// Discretized NDF: density per unit volume at each cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridNdf {
    pub values: Vec<f64>,
}

/// Upwind operator together with its construction diagnostics.
#[derive(Debug, Clone)]
pub struct Advection {
    pub matrix: CsrMatrix,
    /// Boundary faces where the velocity points out of the domain. Their
    /// flux is clamped to zero.
    pub boundary_violations: usize,
}

/// First-order donor-cell discretization of `-div(n f)` with zero flux
/// through the domain boundary.
pub fn build_advection_operator(model: &ModelSpec, grid: &Grid) -> Result<Advection> {
    let d = model.state_dim();
    if grid.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: grid.dim(),
        });
    }
    let mut triplets = Vec::with_capacity((2 * d + 1) * grid.n_nodes());
    let mut violations = 0;
    let mut f = vec![0.0; d];
    for flat in 0..grid.n_nodes() {
        let idx = grid.multi_index(flat);
        let center = grid.center(flat);
        for (dim, axis) in grid.axes.iter().enumerate() {
            let h = axis.width();
            // Upper face of this cell along `dim`.
            let mut face = center.clone();
            face[dim] += 0.5 * h;
            model.eval_field(&face, &mut f);
            let v = f[dim];
            if idx[dim] + 1 == axis.nodes {
                if v > 0.0 {
                    violations += 1;
                }
            } else {
                let next = flat + grid.strides[dim];
                let donor = if v > 0.0 { flat } else { next };
                triplets.push((flat, donor, -v / h));
                triplets.push((next, donor, v / h));
            }
            if idx[dim] == 0 {
                let mut low = center.clone();
                low[dim] -= 0.5 * h;
                model.eval_field(&low, &mut f);
                if f[dim] < 0.0 {
                    violations += 1;
                }
            }
        }
    }
    let n = grid.n_nodes();
    Ok(Advection {
        matrix: CsrMatrix::from_triplets(n, n, triplets)?,
        boundary_violations: violations,
    })
}

/// Maps a grid NDF to its marginal on the sub-grid of `measured_dims` by
/// summing over the remaining axes weighted by their cell widths.
pub fn build_measurement_matrix(grid: &Grid, measured_dims: &[usize]) -> Result<CsrMatrix> {
    let sub = grid.subgrid(measured_dims)?;
    let weight: f64 = (0..grid.dim())
        .filter(|d| !measured_dims.contains(d))
        .map(|d| grid.axes[d].width())
        .product();
    let triplets = (0..grid.n_nodes())
        .map(|flat| {
            let idx = grid.multi_index(flat);
            let row = measured_dims
                .iter()
                .zip(&sub.strides)
                .map(|(&d, s)| idx[d] * s)
                .sum();
            (row, flat, weight)
        })
        .collect();
    CsrMatrix::from_triplets(sub.n_nodes(), grid.n_nodes(), triplets)
}

struct LinearFlow<'a>(&'a CsrMatrix);

impl OdeSystem for LinearFlow<'_> {
    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn rhs(&self, x: &[f64], dx: &mut [f64]) {
        self.0.mul_vec_into(x, dx);
    }
}

/// Transports one particle over `dt`, applies log-space noise, and
/// renormalizes. Negative undershoots of the integrator are clamped.
#[allow(clippy::too_many_arguments)]
pub fn propagate_particle<R: Rng + ?Sized>(
    a: &CsrMatrix,
    grid: &Grid,
    values: &mut [f64],
    dt: f64,
    process_noise_std: f64,
    stepper: &mut Dopri5,
    rng: &mut R,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("time step {dt} must be positive")));
    }
    stepper.integrate(&LinearFlow(a), values, 0.0, dt)?;
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    if process_noise_std > 0.0 {
        for v in values.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *v *= (process_noise_std * xi).exp();
        }
    }
    grid.normalize(values)
}

/// Log of the residual likelihood
/// `exp(-|C n - m|^2 / (2 std^2 len(m)))`.
pub fn log_likelihood(c: &CsrMatrix, values: &[f64], measured: &[f64], std: f64) -> Result<f64> {
    if measured.len() != c.nrows() {
        return Err(Error::Dimension {
            expected: c.nrows(),
            got: measured.len(),
        });
    }
    let cn = c.mul_vec(values)?;
    let ss: f64 = cn.iter().zip(measured).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(-0.5 * ss / (std * std * measured.len() as f64))
}

pub fn likelihood(c: &CsrMatrix, values: &[f64], measured: &[f64], std: f64) -> Result<f64> {
    Ok(log_likelihood(c, values, measured, std)?
        .exp()
        .max(f64::MIN_POSITIVE))
}

pub fn effective_particles(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::invalid("cannot resample with all-zero weights"));
    }
    let n = weights.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] / total;
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cum && j + 1 < n {
            j += 1;
            cum += weights[j] / total;
        }
        out.push(j);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub n_particles: usize,
    /// Resample when `N_eff < resample_threshold * n_particles`.
    pub resample_threshold: f64,
    /// Log-space standard deviation of the per-step process noise.
    pub process_noise_std: f64,
    /// Likelihood scale in density units.
    pub meas_noise_std: f64,
    /// Factor on the per-node Scott's-rule jitter bandwidth.
    pub bw_scale: f64,
    /// Log-space jitter of the initial ensemble.
    pub init_jitter_std: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            n_particles: 120,
            resample_threshold: 0.1,
            process_noise_std: 0.05,
            meas_noise_std: 0.05,
            bw_scale: 1.0,
            init_jitter_std: 0.1,
        }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config("n_particles must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config(
                "resample_threshold must lie in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("process_noise_std", self.process_noise_std),
            ("bw_scale", self.bw_scale),
            ("init_jitter_std", self.init_jitter_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if !(self.meas_noise_std > 0.0) {
            return Err(Error::Config("meas_noise_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PfState {
    pub time: f64,
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl PfState {
    pub fn n_eff(&self) -> f64 {
        effective_particles(&self.weights)
    }
}

/// Per-step output record of the grid filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfStepRecord {
    pub t: f64,
    pub n_eff: f64,
    pub resampled: bool,
    /// Posterior-mean marginal along each axis, one value per cell.
    pub marginals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct GridPf {
    grid: Grid,
    advection: Advection,
    measurement: CsrMatrix,
    measured_grid: Grid,
    cfg: PfConfig,
    integrator: IntegratorConfig,
}

impl GridPf {
    pub fn new(
        model: &ModelSpec,
        grid: Grid,
        cfg: PfConfig,
        integrator: IntegratorConfig,
    ) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        integrator.validate()?;
        let advection = build_advection_operator(model, &grid)?;
        let measurement = build_measurement_matrix(&grid, &model.measured_dims)?;
        let measured_grid = grid.subgrid(&model.measured_dims)?;
        Ok(Self {
            grid,
            advection,
            measurement,
            measured_grid,
            cfg,
            integrator,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn advection(&self) -> &Advection {
        &self.advection
    }

    pub fn measurement(&self) -> &CsrMatrix {
        &self.measurement
    }

    pub fn config(&self) -> &PfConfig {
        &self.cfg
    }

    /// Discretizes the initial estimate and jitters each particle.
    pub fn init<R: Rng + ?Sized>(&self, n0_hat: &Gmd, time: f64, rng: &mut R) -> Result<PfState> {
        let base = self.grid.discretize(n0_hat)?;
        let np = self.cfg.n_particles;
        let seed = rng.next_u64();
        let particles = (0..np)
            .into_par_iter()
            .map(|i| {
                let mut r = child(seed, i as u64);
                let mut p = base.values.clone();
                for v in &mut p {
                    let xi: f64 = r.sample(StandardNormal);
                    *v *= (self.cfg.init_jitter_std * xi).exp();
                }
                self.grid.normalize(&mut p)?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(PfState {
            time,
            particles,
            weights: vec![1.0 / np as f64; np],
        })
    }

    /// Measured density evaluated at the measured-axis cell centers.
    pub fn measured_on_grid(&self, measured: &Gmd) -> Result<Vec<f64>> {
        if measured.dim() != self.measured_grid.dim() {
            return Err(Error::Dimension {
                expected: self.measured_grid.dim(),
                got: measured.dim(),
            });
        }
        Ok((0..self.measured_grid.n_nodes())
            .map(|i| measured.pdf(&self.measured_grid.center(i)))
            .collect())
    }

    pub fn predict<R: Rng + ?Sized>(
        &self,
        state: &mut PfState,
        t_next: f64,
        rng: &mut R,
    ) -> Result<()> {
        let dt = t_next - state.time;
        if !(dt > 0.0) {
            return Err(Error::invalid(format!(
                "prediction target {t_next} is not after the current time {}",
                state.time
            )));
        }
        let seed = rng.next_u64();
        let n = self.grid.n_nodes();
        state
            .particles
            .par_iter_mut()
            .enumerate()
            .map_init(
                || Dopri5::new(n, self.integrator),
                |stepper, (i, p)| {
                    let mut r = child(seed, i as u64);
                    propagate_particle(
                        &self.advection.matrix,
                        &self.grid,
                        p,
                        dt,
                        self.cfg.process_noise_std,
                        stepper,
                        &mut r,
                    )
                    .map_err(|e| e.in_stage(format!("particle {i}")))
                },
            )
            .collect::<Result<Vec<()>>>()?;
        state.time = t_next;
        Ok(())
    }

    /// Bootstrap weight update against the measured density.
    pub fn update(&self, state: &mut PfState, measured: &Gmd) -> Result<()> {
        let m = self.measured_on_grid(measured)?;
        let log_l: Vec<f64> = state
            .particles
            .par_iter()
            .map(|p| log_likelihood(&self.measurement, p, &m, self.cfg.meas_noise_std))
            .collect::<Result<_>>()?;
        let log_w: Vec<f64> = state
            .weights
            .iter()
            .zip(&log_l)
            .map(|(w, l)| {
                if *w > 0.0 {
                    w.ln() + l
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::invalid("all particle weights vanished"));
        }
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let sum: f64 = w.iter().sum();
        state.weights = w.into_iter().map(|v| v / sum).collect();
        Ok(())
    }

    /// Systematic resampling followed by per-node log-space jitter with a
    /// Scott's-rule bandwidth over the resampled log-particles.
    pub fn regularized_resample<R: Rng + ?Sized>(
        &self,
        state: &mut PfState,
        rng: &mut R,
    ) -> Result<()> {
        let idx = systematic_resample(&state.weights, rng)?;
        let np = idx.len();
        let n = self.grid.n_nodes();
        let mut logs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| {
                state.particles[i]
                    .iter()
                    .map(|v| v.max(LOG_FLOOR).ln())
                    .collect()
            })
            .collect();
        let factor = self.cfg.bw_scale * (np as f64).powf(-1.0 / 5.0);
        let h: Vec<f64> = (0..n)
            .map(|j| {
                let mean = logs.iter().map(|p| p[j]).sum::<f64>() / np as f64;
                let var = logs.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (np - 1) as f64;
                factor * var.sqrt()
            })
            .collect();
        let seed = rng.next_u64();
        state.particles = logs
            .par_iter_mut()
            .enumerate()
            .map(|(i, lp)| {
                let mut r = child(seed, i as u64);
                let mut p: Vec<f64> = lp
                    .iter()
                    .zip(&h)
                    .map(|(l, hj)| {
                        let xi: f64 = if *hj > 0.0 {
                            r.sample(StandardNormal)
                        } else {
                            0.0
                        };
                        (l + hj * xi).exp()
                    })
                    .collect();
                self.grid.normalize(&mut p)?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        state.weights = vec![1.0 / np as f64; np];
        Ok(())
    }

    /// Resamples if the effective sample size is below the threshold.
    pub fn maybe_resample<R: Rng + ?Sized>(
        &self,
        state: &mut PfState,
        rng: &mut R,
    ) -> Result<bool> {
        if state.n_eff() < self.cfg.resample_threshold * self.cfg.n_particles as f64 {
            self.regularized_resample(state, rng)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Weighted mean of the particles, renormalized.
    pub fn posterior_mean(&self, state: &PfState) -> Result<GridNdf> {
        let n = self.grid.n_nodes();
        let mut values = vec![0.0; n];
        for (p, w) in state.particles.iter().zip(&state.weights) {
            for (v, x) in values.iter_mut().zip(p) {
                *v += w * x;
            }
        }
        self.grid.normalize(&mut values)?;
        Ok(GridNdf { values })
    }

    pub fn estimate_marginal(&self, state: &PfState, dim: usize) -> Result<Marginal1d> {
        let mean = self.posterior_mean(state)?;
        self.grid.marginal(&mean.values, dim)
    }

    /// Predict, weight, and resample if degenerate.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut PfState,
        t_next: f64,
        measured: &Gmd,
        rng: &mut R,
    ) -> Result<PfStepRecord> {
        self.predict(state, t_next, rng)?;
        self.update(state, measured)?;
        let mut rec = self.record(state, false)?;
        rec.resampled = self.maybe_resample(state, rng)?;
        Ok(rec)
    }

    /// Record of the current posterior without advancing it.
    pub fn record(&self, state: &PfState, resampled: bool) -> Result<PfStepRecord> {
        let mean = self.posterior_mean(state)?;
        let marginals = (0..self.grid.dim())
            .map(|d| match self.grid.marginal(&mean.values, d)? {
                Marginal1d::Piecewise { values, .. } => Ok(values),
                Marginal1d::Mixture(_) => unreachable!("grid marginals are piecewise"),
            })
            .collect::<Result<_>>()?;
        Ok(PfStepRecord {
            t: state.time,
            n_eff: state.n_eff(),
            resampled,
            marginals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{l1_distance, QUAD_NODES};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn drift1d(v: f64, nodes: usize) -> (ModelSpec, Grid) {
        (
            ModelSpec::constant_drift(vec![v], vec![0]).unwrap(),
            Grid::new(vec![Axis::new(0.0, 10.0, nodes).unwrap()]).unwrap(),
        )
    }

    #[test]
    fn upwind_stencil_in_1d() {
        let (model, grid) = drift1d(2.0, 10);
        let adv = build_advection_operator(&model, &grid).unwrap();
        let a = &adv.matrix;
        let h = 1.0;
        for i in 1..9 {
            assert_abs_diff_eq!(a.get(i, i - 1), 2.0 / h);
            assert_abs_diff_eq!(a.get(i, i), -2.0 / h);
            assert_eq!(a.get(i, i + 1), 0.0);
        }
        // Inflow cell and blocked outflow cell.
        assert_abs_diff_eq!(a.get(0, 0), -2.0);
        assert_eq!(a.get(9, 9), 0.0);
        assert_eq!(adv.boundary_violations, 1);
        for s in a.column_sums() {
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_field_gives_zero_operator() {
        let model = ModelSpec::stationary(2, vec![0]).unwrap();
        let grid = Grid::growth2d(8, 4).unwrap();
        let adv = build_advection_operator(&model, &grid).unwrap();
        assert_eq!(adv.matrix.nnz(), 0);
        assert_eq!(adv.boundary_violations, 0);
    }

    #[test]
    fn growth_operator_has_no_growth_rate_transport() {
        let grid = Grid::growth2d(80, 30).unwrap();
        let adv = build_advection_operator(&ModelSpec::growth2d_default(), &grid).unwrap();
        let a = &adv.matrix;
        assert!(a.nnz() <= 5 * grid.n_nodes());
        for flat in 0..grid.n_nodes() {
            let idx = grid.multi_index(flat);
            for (col, _) in a.row(flat) {
                let other = grid.multi_index(col);
                assert_eq!(other[1], idx[1], "coupling across g at node {flat}");
            }
        }
        for s in a.column_sums() {
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn measurement_matrix_cases() {
        let grid = Grid::growth2d(6, 4).unwrap();
        let full = build_measurement_matrix(&grid, &[0, 1]).unwrap();
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        assert_eq!(full.mul_vec(&x).unwrap(), x);

        let c = build_measurement_matrix(&grid, &[0]).unwrap();
        let flat = vec![0.7; 24];
        for v in c.mul_vec(&flat).unwrap() {
            assert_abs_diff_eq!(v, 0.7 * 1.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn measured_marginal_of_gaussian_matches_quadrature() {
        let grid = Grid::growth2d(140, 60).unwrap();
        let g = Gmd::single(dvector![2.0, 0.6], dmatrix![0.1, 0.02; 0.02, 0.01]).unwrap();
        let n = grid.discretize(&g).unwrap();
        let c = build_measurement_matrix(&grid, &[0]).unwrap();
        let cn = c.mul_vec(&n.values).unwrap();
        let exact = g.marginalize(&[0]).unwrap();
        let axis = grid.axes()[0];
        for (i, v) in cn.iter().enumerate() {
            assert!((v - exact.pdf(&[axis.center(i)])).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_dynamics_without_noise_is_identity() {
        let model = ModelSpec::stationary(2, vec![0]).unwrap();
        let grid = Grid::growth2d(8, 4).unwrap();
        let adv = build_advection_operator(&model, &grid).unwrap();
        let g = Gmd::single(dvector![3.0, 0.6], dmatrix![1.0, 0.0; 0.0, 0.1]).unwrap();
        let n0 = grid.discretize(&g).unwrap();
        let mut n = n0.values.clone();
        let mut stepper = Dopri5::new(grid.n_nodes(), IntegratorConfig::default());
        propagate_particle(
            &adv.matrix,
            &grid,
            &mut n,
            0.5,
            0.0,
            &mut stepper,
            &mut seeded(1),
        )
        .unwrap();
        for (a, b) in n.iter().zip(&n0.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    fn translation_error(nodes: usize) -> (f64, f64, f64) {
        let (model, grid) = drift1d(1.0, nodes);
        let adv = build_advection_operator(&model, &grid).unwrap();
        let g = Gmd::single(dvector![3.0], dmatrix![0.04]).unwrap();
        let mut n = grid.discretize(&g).unwrap().values;
        let mut stepper = Dopri5::new(grid.n_nodes(), IntegratorConfig::default());
        propagate_particle(
            &adv.matrix,
            &grid,
            &mut n,
            2.0,
            0.0,
            &mut stepper,
            &mut seeded(1),
        )
        .unwrap();
        let axis = grid.axes()[0];
        let peak = (0..nodes).max_by(|&a, &b| n[a].total_cmp(&n[b])).unwrap();
        let est = grid.marginal(&n, 0).unwrap();
        let exact = Marginal1d::Mixture(Gmd::single(dvector![5.0], dmatrix![0.04]).unwrap());
        (
            axis.center(peak),
            l1_distance(&est, &exact, QUAD_NODES).unwrap(),
            axis.width(),
        )
    }

    #[test]
    fn constant_advection_translates_and_converges() {
        let (peak, coarse, h) = translation_error(200);
        assert!((peak - 5.0).abs() <= h, "peak at {peak}");
        let (_, fine, _) = translation_error(400);
        assert!(coarse / fine >= 1.5, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn mass_is_conserved_without_renormalization() {
        let grid = Grid::growth2d(80, 30).unwrap();
        let adv = build_advection_operator(&ModelSpec::growth2d_default(), &grid).unwrap();
        let g = Gmd::single(dvector![1.5, 0.5], dmatrix![0.1, 0.0; 0.0, 0.01]).unwrap();
        let mut n = grid.discretize(&g).unwrap().values;
        let mut stepper = Dopri5::new(grid.n_nodes(), IntegratorConfig::default());
        for _ in 0..5 {
            stepper
                .integrate(&LinearFlow(&adv.matrix), &mut n, 0.0, 0.33)
                .unwrap();
            assert!((grid.mass(&n) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn likelihood_properties() {
        let c = CsrMatrix::identity(3);
        let m = [0.2, 0.5, 0.3];
        assert_eq!(likelihood(&c, &m, &m, 0.05).unwrap(), 1.0);
        let near = likelihood(&c, &[0.25, 0.5, 0.3], &m, 0.05).unwrap();
        let far = likelihood(&c, &[0.4, 0.5, 0.3], &m, 0.05).unwrap();
        assert!(1.0 > near && near > far && far > 0.0);
    }

    #[test]
    fn offset_particle_is_strongly_penalized() {
        let model = ModelSpec::growth2d_default();
        let grid = Grid::growth2d(80, 30).unwrap();
        let pf = GridPf::new(
            &model,
            grid.clone(),
            PfConfig::default(),
            IntegratorConfig::default(),
        )
        .unwrap();
        let cov = dmatrix![0.1, 0.0; 0.0, 0.01];
        let good = grid
            .discretize(&Gmd::single(dvector![1.5, 0.5], cov.clone()).unwrap())
            .unwrap();
        let off = grid
            .discretize(&Gmd::single(dvector![2.5, 0.5], cov).unwrap())
            .unwrap();
        let measured = Gmd::single(dvector![1.5], dmatrix![0.11]).unwrap();
        let m = pf.measured_on_grid(&measured).unwrap();
        let lg = log_likelihood(pf.measurement(), &good.values, &m, 0.05).unwrap();
        let lo = log_likelihood(pf.measurement(), &off.values, &m, 0.05).unwrap();
        assert!(lg - lo > 1e3f64.ln());
    }

    #[test]
    fn effective_particle_counts() {
        assert_abs_diff_eq!(
            effective_particles(&[1.0 / 120.0; 120]),
            120.0,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(effective_particles(&[1.0, 0.0, 0.0]), 1.0);
        assert_abs_diff_eq!(effective_particles(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn systematic_resampling() {
        let idx = systematic_resample(&[0.0, 1.0, 0.0], &mut seeded(3)).unwrap();
        assert_eq!(idx, vec![1, 1, 1]);
        let idx = systematic_resample(&[0.5, 0.5], &mut seeded(3)).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert!(systematic_resample(&[0.0, 0.0], &mut seeded(3)).is_err());
    }

    fn small_pf() -> (GridPf, Gmd) {
        let grid = Grid::growth2d(20, 8).unwrap();
        let cfg = PfConfig {
            n_particles: 16,
            ..PfConfig::default()
        };
        let pf = GridPf::new(
            &ModelSpec::growth2d_default(),
            grid,
            cfg,
            IntegratorConfig::default(),
        )
        .unwrap();
        let n0 = Gmd::single(dvector![1.95, 0.65], dmatrix![0.15, 0.0; 0.0, 0.015]).unwrap();
        (pf, n0)
    }

    #[test]
    fn degenerate_weights_resample_to_one_particle() {
        let (pf, n0) = small_pf();
        let mut s = pf.init(&n0, 0.0, &mut seeded(1)).unwrap();
        s.weights = vec![0.0; 16];
        s.weights[5] = 1.0;
        let chosen = s.particles[5].clone();
        pf.regularized_resample(&mut s, &mut seeded(2)).unwrap();
        for p in &s.particles {
            for (a, b) in p.iter().zip(&chosen) {
                assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }
        assert!(s.weights.iter().all(|w| *w == 1.0 / 16.0));
    }

    #[test]
    fn posterior_mean_cases() {
        let (pf, n0) = small_pf();
        let mut s = pf.init(&n0, 0.0, &mut seeded(1)).unwrap();
        let m = pf.posterior_mean(&s).unwrap();
        assert_abs_diff_eq!(pf.grid().mass(&m.values), 1.0, epsilon = 1e-9);

        s.particles.truncate(2);
        s.weights = vec![0.5, 0.5];
        let m = pf.posterior_mean(&s).unwrap();
        for (i, v) in m.values.iter().enumerate() {
            assert_abs_diff_eq!(
                *v,
                0.5 * (s.particles[0][i] + s.particles[1][i]),
                epsilon = 1e-12
            );
        }
        s.particles.truncate(1);
        s.weights = vec![1.0];
        let single = pf.posterior_mean(&s).unwrap();
        for (a, b) in single.values.iter().zip(&s.particles[0]) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn matching_measurement_keeps_uniform_weights() {
        let model = ModelSpec::stationary(2, vec![0]).unwrap();
        let grid = Grid::growth2d(20, 8).unwrap();
        let cfg = PfConfig {
            n_particles: 8,
            process_noise_std: 0.0,
            init_jitter_std: 0.0,
            ..PfConfig::default()
        };
        let pf = GridPf::new(&model, grid, cfg, IntegratorConfig::default()).unwrap();
        let n0 = Gmd::single(dvector![3.0, 0.6], dmatrix![1.0, 0.0; 0.0, 0.1]).unwrap();
        let mut s = pf.init(&n0, 0.0, &mut seeded(1)).unwrap();
        pf.predict(&mut s, 0.33, &mut seeded(2)).unwrap();
        let m0 = n0.marginalize(&[0]).unwrap();
        pf.update(&mut s, &m0).unwrap();
        for w in &s.weights {
            assert_abs_diff_eq!(*w, 1.0 / 8.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn step_keeps_unit_mass_and_weights() {
        let (pf, n0) = small_pf();
        let mut rng = seeded(4);
        let mut s = pf.init(&n0, 0.0, &mut rng).unwrap();
        let measured = Gmd::single(dvector![1.8], dmatrix![0.11]).unwrap();
        let rec = pf.step(&mut s, 0.33, &measured, &mut rng).unwrap();
        assert_eq!(rec.marginals.len(), 2);
        assert_abs_diff_eq!(s.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        for p in &s.particles {
            assert!(p.iter().all(|v| *v >= 0.0));
            assert_abs_diff_eq!(pf.grid().mass(p), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn parallel_and_serial_predictions_agree() {
        let (pf, n0) = small_pf();
        let s0 = pf.init(&n0, 0.0, &mut seeded(4)).unwrap();
        let mut a = s0.clone();
        pf.predict(&mut a, 0.33, &mut seeded(5)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let mut b = s0.clone();
        pool.install(|| pf.predict(&mut b, 0.33, &mut seeded(5)))
            .unwrap();
        assert_eq!(a.particles, b.particles);
    }
}
