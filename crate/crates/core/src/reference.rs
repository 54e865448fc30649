//! Ground truth by the method of characteristics and synthetic snapshots.
//!
//! With a no-influx boundary and no division or death, the PBE solution is
//! carried exactly by cells moving along single-cell trajectories: draw a
//! sample from the initial NDF and integrate each member forward. Snapshots
//! mimic flow cytometry by subsampling cells at each time, projecting onto
//! the measured coordinates, and adding instrument noise.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmd::{fit_em, Gmd};
use crate::models::{MeasurementVector, ModelSpec, StateVector};
use crate::ode::{Dopri5, IntegratorConfig};

/// Draws rejected before giving up on truncating to the positive orthant.
const MAX_REDRAWS_PER_CELL: usize = 1000;

/// Reference cell population at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEnsemble {
    pub time: f64,
    #[serde(with = "crate::serde_vecs")]
    pub cells: Vec<StateVector>,
}

impl CellEnsemble {
    /// Coordinate `dim` of every cell.
    pub fn coordinate(&self, dim: usize) -> Vec<f64> {
        self.cells.iter().map(|c| c[dim]).collect()
    }

    /// Reference marginal NDF along `dim`: a 1-D Gaussian KDE over all
    /// cells with Scott's-rule bandwidth, count-normalized.
    pub fn marginal_kde(&self, dim: usize) -> Result<Gmd> {
        if self.cells.is_empty() {
            return Err(Error::invalid("empty reference ensemble"));
        }
        if dim >= self.cells[0].len() {
            return Err(Error::invalid(format!("dimension {dim} out of range")));
        }
        let pts: Vec<_> = self
            .cells
            .iter()
            .map(|c| DVector::from_element(1, c[dim]))
            .collect();
        Gmd::kde(&pts, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// `y + e` with `e ~ N(0, variance)` per measured coordinate.
    AdditiveGaussian {
        variance: f64,
    },
    /// `y * exp(e)` with `e ~ N(0, variance)` per measured coordinate.
    MultiplicativeLogNormal {
        variance: f64,
    },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::AdditiveGaussian { variance }
            | NoiseModel::MultiplicativeLogNormal { variance } => {
                if variance >= 0.0 && variance.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "noise variance must be >= 0, got {variance}"
                    )))
                }
            }
        }
    }

    fn apply<R: Rng + ?Sized>(&self, y: &mut MeasurementVector, rng: &mut R) {
        match *self {
            NoiseModel::None => {}
            NoiseModel::AdditiveGaussian { variance } => {
                let sd = variance.sqrt();
                for v in y.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += sd * e;
                }
            }
            NoiseModel::MultiplicativeLogNormal { variance } => {
                let sd = variance.sqrt();
                for v in y.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v *= (sd * e).exp();
                }
            }
        }
    }
}

/// Draws `n_cells` from `n0` and propagates each along its characteristic,
/// returning one ensemble per requested time.
pub fn simulate_reference<R: Rng + ?Sized>(
    model: &ModelSpec,
    n0: &Gmd,
    n_cells: usize,
    times: &[f64],
    integrator: &IntegratorConfig,
    rng: &mut R,
) -> Result<Vec<CellEnsemble>> {
    let d = model.state_dim();
    if n0.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            got: n0.dim(),
        });
    }
    if n_cells == 0 {
        return Err(Error::invalid("at least one reference cell required"));
    }
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "output times must be nonempty and strictly increasing",
        ));
    }

    let initial = draw_initial(model, n0, n_cells, rng)?;
    let trajectories: Vec<Vec<StateVector>> = initial
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut stepper = Dopri5::new(d, *integrator);
            let mut x = x0.clone();
            let mut out = Vec::with_capacity(times.len());
            let mut t_prev = times[0];
            for &t in times {
                stepper
                    .integrate(model, x.as_mut_slice(), t_prev, t)
                    .map_err(|e| Error::Integration {
                        t,
                        reason: format!("reference cell {i}: {e}"),
                    })?;
                out.push(x.clone());
                t_prev = t;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &time)| CellEnsemble {
            time,
            cells: trajectories.iter().map(|tr| tr[k].clone()).collect(),
        })
        .collect())
}

fn draw_initial<R: Rng + ?Sized>(
    model: &ModelSpec,
    n0: &Gmd,
    n_cells: usize,
    rng: &mut R,
) -> Result<Vec<StateVector>> {
    if !model.nonnegative_states() {
        return n0.sample(n_cells, rng);
    }
    let mut cells = Vec::with_capacity(n_cells);
    let mut attempts = 0usize;
    while cells.len() < n_cells {
        for x in n0.sample(n_cells - cells.len(), rng)? {
            attempts += 1;
            if x.iter().all(|&v| v >= 0.0) {
                cells.push(x);
            }
        }
        if attempts > MAX_REDRAWS_PER_CELL * n_cells {
            return Err(Error::invalid(
                "initial density has almost no mass in the nonnegative orthant",
            ));
        }
    }
    Ok(cells)
}

/// Measures `n_meas` distinct cells chosen uniformly at random.
pub fn take_snapshot<R: Rng + ?Sized>(
    ensemble: &CellEnsemble,
    model: &ModelSpec,
    n_meas: usize,
    noise: &NoiseModel,
    rng: &mut R,
) -> Result<Vec<MeasurementVector>> {
    let population = ensemble.cells.len();
    if n_meas > population {
        return Err(Error::invalid(format!(
            "cannot measure {n_meas} cells out of {population}"
        )));
    }
    let picked = index::sample(rng, population, n_meas).into_vec();
    Ok(picked
        .into_iter()
        .map(|i| {
            let mut y = model.measure(&ensemble.cells[i]);
            noise.apply(&mut y, rng);
            y
        })
        .collect())
}

/// Fits the measured density of one snapshot; `total_count` is the number
/// of measured cells.
pub fn fit_measurement_density<R: Rng + ?Sized>(
    raw: &[MeasurementVector],
    n_gmd: usize,
    em_max_iter: usize,
    rng: &mut R,
) -> Result<Gmd> {
    let g = fit_em(raw, n_gmd, em_max_iter, rng)?;
    Ok(g.with_total_count(raw.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub t: f64,
    #[serde(with = "crate::serde_vecs")]
    pub raw: Vec<MeasurementVector>,
    pub gmd: Gmd,
}

/// Timestamped measured samples with their fitted densities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSeries {
    pub model_id: String,
    pub noise: NoiseModel,
    pub entries: Vec<SnapshotEntry>,
}

impl SnapshotSeries {
    pub fn validate(&self, output_dim: usize, n_gmd: usize) -> Result<()> {
        if self.entries.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::invalid("snapshot times must be strictly increasing"));
        }
        for e in &self.entries {
            if e.gmd.dim() != output_dim || e.gmd.len() != n_gmd {
                return Err(Error::invalid(format!(
                    "snapshot at t = {} has a {}-component {}-D density, expected {n_gmd} in {output_dim}-D",
                    e.t,
                    e.gmd.len(),
                    e.gmd.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.t).collect()
    }

    /// Raw measurements as `time,dim0[,dim1...]` rows.
    pub fn write_raw_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self
            .entries
            .iter()
            .find_map(|e| e.raw.first().map(|r| r.len()))
            .unwrap_or(1);
        let header: Vec<String> = std::iter::once("time".to_string())
            .chain((0..d).map(|i| format!("dim{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for e in &self.entries {
            for y in &e.raw {
                let mut line = format!("{}", e.t);
                for v in y.iter() {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Settings for turning reference ensembles into a snapshot series.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotPlan {
    pub n_meas: usize,
    pub noise: NoiseModel,
    pub n_gmd: usize,
    pub em_max_iter: usize,
}

pub fn generate_snapshots<R: Rng + ?Sized>(
    ensembles: &[CellEnsemble],
    model: &ModelSpec,
    plan: &SnapshotPlan,
    rng: &mut R,
) -> Result<SnapshotSeries> {
    let entries = ensembles
        .iter()
        .map(|ens| {
            let raw = take_snapshot(ens, model, plan.n_meas, &plan.noise, rng)?;
            let gmd = fit_measurement_density(&raw, plan.n_gmd, plan.em_max_iter, rng)
                .map_err(|e| e.in_stage(format!("measurement fit at t = {}", ens.time)))?;
            Ok(SnapshotEntry {
                t: ens.time,
                raw,
                gmd,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SnapshotSeries {
        model_id: model.model_id().to_string(),
        noise: plan.noise,
        entries,
    })
}
