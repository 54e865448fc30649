//! Characteristics-based density estimator.
//!
//! The NDF is represented by `n_cand` candidate cells. Each candidate carries
//! a small covariance which is pushed through the single-cell flow with an
//! unscented sigma-point set. One estimator cycle is
//!
//! 1. [`CharEstimator::predict`]: propagate every sigma point to the next
//!    snapshot time, recompute candidate moments and predicted outputs, and
//!    fit a mixture to the predicted output distribution;
//! 2. [`CharEstimator::update`]: weight candidates by the measured output
//!    density, build the posterior kernel mixture around the candidates, and
//!    score the mismatch between predicted and measured outputs by a Monte
//!    Carlo KL divergence;
//! 3. [`CharEstimator::maybe_resample`]: if that divergence exceeds the
//!    threshold, draw fresh candidates from the posterior and reset their
//!    covariances.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmd::{
    fit_em_from, fit_em_with, kl_mc, scotts_bandwidth, EmConfig, Gmd, DENSITY_FLOOR, REG_FLOOR,
};
use crate::models::{MeasurementVector, ModelSpec, StateVector};
use crate::ode::{Dopri5, IntegratorConfig};

/// How candidates are weighted against the measured output density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `alpha_j ~ n_meas(y_j)`.
    Likelihood,
    /// `alpha_j ~ n_meas(y_j) / n_pred(y_j)`: the posterior's output
    /// marginal follows the measurement while the conditional over the
    /// unmeasured states is kept.
    #[default]
    DensityRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharConfig {
    /// Number of candidate cells.
    pub n_cand: usize,
    /// KL divergence above which candidates are resampled.
    pub d_kl_max: f64,
    /// Factor on Scott's-rule bandwidth for the posterior kernels.
    pub bw_scale: f64,
    /// Initial candidate covariance is `w0 * I`.
    pub w0: f64,
    /// Components of the predicted output mixture.
    pub n_gmd: usize,
    pub em_max_iter: usize,
    /// Relative log-likelihood change that ends a predicted-output refit.
    #[serde(default = "default_em_rel_tol")]
    pub em_rel_tol: f64,
    #[serde(default)]
    pub update_rule: UpdateRule,
    /// Start each predicted-output refit from the previous fit instead of
    /// fresh random seedings.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_true() -> bool {
    true
}

fn default_em_rel_tol() -> f64 {
    1e-5
}

impl CharConfig {
    /// Tuning for the size/growth-rate benchmark.
    pub fn bench2d() -> Self {
        Self {
            n_cand: 300,
            d_kl_max: 0.08,
            bw_scale: 1.0 / 3.0,
            w0: 3.86e-12,
            n_gmd: 3,
            em_max_iter: 500,
            em_rel_tol: default_em_rel_tol(),
            update_rule: UpdateRule::default(),
            warm_start: true,
        }
    }

    /// Tuning for the gene-expression benchmark.
    pub fn bench3d() -> Self {
        Self {
            n_cand: 100,
            d_kl_max: 0.05,
            bw_scale: 0.75,
            w0: 5.2e-6,
            n_gmd: 3,
            em_max_iter: 400,
            em_rel_tol: default_em_rel_tol(),
            update_rule: UpdateRule::default(),
            warm_start: true,
        }
    }

    pub fn validate(&self, output_dim: usize) -> Result<()> {
        if self.n_gmd == 0 || self.n_cand < self.n_gmd * (output_dim + 1) {
            return Err(Error::Config(format!(
                "n_cand = {} is too small for {} output components in {output_dim}-D",
                self.n_cand, self.n_gmd
            )));
        }
        if !(self.d_kl_max > 0.0) {
            return Err(Error::Config("d_kl_max must be positive".into()));
        }
        if !(self.bw_scale > 0.0 && self.bw_scale.is_finite()) {
            return Err(Error::Config("bw_scale must be positive".into()));
        }
        if !(self.w0 >= 0.0 && self.w0.is_finite()) {
            return Err(Error::Config("w0 must be nonnegative".into()));
        }
        if self.em_max_iter == 0 {
            return Err(Error::Config("em_max_iter must be at least 1".into()));
        }
        if !(self.em_rel_tol > 0.0) {
            return Err(Error::Config("em_rel_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Unscented-transform weights for means and covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

/// Symmetric sigma-point set with `kappa = 3 - d` and equal mean and
/// covariance weights.
pub fn sigma_points(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(Vec<StateVector>, SigmaWeights)> {
    let d = mean.len();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: cov.nrows(),
        });
    }
    let kappa = 3.0 - d as f64;
    let spread = d as f64 + kappa;
    let scaled = cov * spread;
    let root = scaled
        .clone()
        .cholesky()
        .or_else(|| (scaled + DMatrix::identity(d, d) * REG_FLOOR).cholesky())
        .ok_or_else(|| Error::invalid("sigma-point covariance has no Cholesky square root"))?
        .l();

    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(mean.clone());
    for e in 0..d {
        points.push(mean + root.column(e));
    }
    for e in 0..d {
        points.push(mean - root.column(e));
    }
    let side = 1.0 / (2.0 * spread);
    let mut w = vec![side; 2 * d + 1];
    w[0] = kappa / spread;
    Ok((
        points,
        SigmaWeights {
            mean_weights: w.clone(),
            cov_weights: w,
        },
    ))
}

/// Weighted mean and covariance of a sigma-point set.
pub fn sigma_moments(
    points: &[StateVector],
    weights: &SigmaWeights,
) -> (StateVector, DMatrix<f64>) {
    let d = points[0].len();
    let mean = points
        .iter()
        .zip(&weights.mean_weights)
        .fold(DVector::zeros(d), |acc, (p, w)| acc + p * *w);
    let cov = points
        .iter()
        .zip(&weights.cov_weights)
        .fold(DMatrix::zeros(d, d), |acc, (p, w)| {
            let diff = p - &mean;
            acc + &diff * diff.transpose() * *w
        });
    (mean, (&cov + cov.transpose()) * 0.5)
}

/// A sample of the NDF with its own uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCell {
    pub mean: StateVector,
    pub covariance: DMatrix<f64>,
    pub sigma_points: Vec<StateVector>,
    pub predicted_output: MeasurementVector,
    pub mixing_proportion: f64,
}

impl CandidateCell {
    fn new(
        model: &ModelSpec,
        mean: StateVector,
        covariance: DMatrix<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let (sigma, weights) = sigma_points(&mean, &covariance)?;
        let predicted_output = weighted_output(model, &sigma, &weights);
        Ok(Self {
            mean,
            covariance,
            sigma_points: sigma,
            predicted_output,
            mixing_proportion: alpha,
        })
    }
}

fn weighted_output(
    model: &ModelSpec,
    sigma: &[StateVector],
    weights: &SigmaWeights,
) -> MeasurementVector {
    sigma
        .iter()
        .zip(&weights.mean_weights)
        .fold(DVector::zeros(model.output_dim()), |acc, (p, w)| {
            acc + model.measure(p) * *w
        })
}

#[derive(Debug, Clone)]
pub struct CharState {
    pub time: f64,
    pub candidates: Vec<CandidateCell>,
    /// Mixture fitted to the candidates' predicted outputs.
    pub predicted_output_gmd: Gmd,
    /// Current estimate of the full NDF.
    pub posterior_gmd: Gmd,
    pub last_kl: f64,
    pub resampled: bool,
    /// Single-cell ODE solves performed by the last prediction.
    pub last_step_solves: usize,
    /// Cumulative single-cell ODE solves.
    pub ode_solves: usize,
    pub warnings: Vec<String>,
}

impl CharState {
    pub fn outputs(&self) -> Vec<MeasurementVector> {
        self.candidates
            .iter()
            .map(|c| c.predicted_output.clone())
            .collect()
    }

    pub fn means(&self) -> Vec<StateVector> {
        self.candidates.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn mixing_proportions(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| c.mixing_proportion)
            .collect()
    }
}

/// Warm-start mixture for refitting `outputs`: `previous` with every
/// component of weight below `1 / n` moved onto the worst-explained output
/// and given the pooled covariance. `None` if no usable start exists.
fn reseed_weak_components(previous: &Gmd, outputs: &[MeasurementVector]) -> Option<Gmd> {
    let n = outputs.len();
    let min_weight = 1.0 / n as f64;
    let weak: Vec<usize> = (0..previous.len())
        .filter(|&i| !(previous.components()[i].weight() >= min_weight))
        .collect();
    if weak.is_empty() {
        return Some(previous.clone());
    }
    if weak.len() == previous.len() || n < 2 {
        return None;
    }
    let d = previous.dim();
    let mean = outputs.iter().fold(DVector::zeros(d), |a, y| a + y) / n as f64;
    let pooled = outputs.iter().fold(DMatrix::zeros(d, d), |a, y| {
        let c = y - &mean;
        a + &c * c.transpose()
    }) / (n - 1) as f64;
    let mut order: Vec<usize> = (0..n).collect();
    let fit: Vec<f64> = outputs
        .iter()
        .map(|y| previous.log_pdf(y.as_slice()))
        .collect();
    order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
    let share = 1.0 / previous.len() as f64;
    let mut next_worst = order.into_iter();
    let parts = previous
        .components()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if weak.contains(&i) {
                let at = next_worst.next().expect("more outputs than components");
                (share, outputs[at].clone(), pooled.clone())
            } else {
                (c.weight(), c.mean().clone(), c.covariance().clone())
            }
        })
        .collect();
    Gmd::new(parts, previous.total_count()).ok()
}

/// Per-step output record of the estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharStepRecord {
    pub t: f64,
    pub resampled: bool,
    pub kl: f64,
    pub posterior_gmd: Gmd,
    /// One-dimensional marginals of the posterior, in coordinate order.
    pub marginals: Vec<Gmd>,
}

#[derive(Debug, Clone)]
pub struct CharEstimator {
    model: ModelSpec,
    cfg: CharConfig,
    integrator: IntegratorConfig,
}

impl CharEstimator {
    pub fn new(model: ModelSpec, cfg: CharConfig, integrator: IntegratorConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate(model.output_dim())?;
        integrator.validate()?;
        Ok(Self {
            model,
            cfg,
            integrator,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn config(&self) -> &CharConfig {
        &self.cfg
    }

    fn initial_covariance(&self) -> DMatrix<f64> {
        let d = self.model.state_dim();
        DMatrix::identity(d, d) * self.cfg.w0
    }

    fn fresh_candidates(&self, means: Vec<StateVector>) -> Result<Vec<CandidateCell>> {
        let alpha = 1.0 / means.len() as f64;
        let w0 = self.initial_covariance();
        means
            .into_iter()
            .map(|m| CandidateCell::new(&self.model, m, w0.clone(), alpha))
            .collect()
    }

    fn em_config(&self) -> EmConfig {
        EmConfig {
            rel_tol: self.cfg.em_rel_tol,
            ..EmConfig::new(self.cfg.n_gmd, self.cfg.em_max_iter)
        }
    }

    fn fit_outputs<R: Rng + ?Sized>(
        &self,
        outputs: &[MeasurementVector],
        previous: Option<&Gmd>,
        rng: &mut R,
    ) -> Result<Gmd> {
        if let Some(init) = previous
            .filter(|_| self.cfg.warm_start)
            .and_then(|p| reseed_weak_components(p, outputs))
        {
            if let Ok((g, _)) = fit_em_from(outputs, &init, &self.em_config()) {
                return Ok(g);
            }
        }
        fit_em_with(outputs, &self.em_config(), rng)
            .map(|(g, _)| g)
            .map_err(|e| e.in_stage("predicted output fit"))
    }

    fn kernel_posterior(&self, candidates: &[CandidateCell], total_count: f64) -> Result<Gmd> {
        let means: Vec<_> = candidates.iter().map(|c| c.mean.clone()).collect();
        let weights: Vec<_> = candidates.iter().map(|c| c.mixing_proportion).collect();
        let bw = scotts_bandwidth(&means, self.cfg.bw_scale)?;
        Gmd::from_kernels(&means, &weights, &bw, total_count)
    }

    /// Samples the initial candidates from the estimated initial NDF.
    pub fn init<R: Rng + ?Sized>(&self, n0_hat: &Gmd, time: f64, rng: &mut R) -> Result<CharState> {
        let d = self.model.state_dim();
        if n0_hat.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: n0_hat.dim(),
            });
        }
        let means = n0_hat.sample(self.cfg.n_cand, rng)?;
        let candidates = self.fresh_candidates(means)?;
        let outputs: Vec<_> = candidates
            .iter()
            .map(|c| c.predicted_output.clone())
            .collect();
        let predicted_output_gmd = self.fit_outputs(&outputs, None, rng)?;
        let posterior_gmd = self.kernel_posterior(&candidates, n0_hat.total_count())?;
        Ok(CharState {
            time,
            candidates,
            predicted_output_gmd,
            posterior_gmd,
            last_kl: 0.0,
            resampled: false,
            last_step_solves: 0,
            ode_solves: 0,
            warnings: Vec::new(),
        })
    }

    /// Propagates all sigma points to `t_next` and refits the predicted
    /// output density. Mixing proportions are left untouched.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        state: &mut CharState,
        t_next: f64,
        rng: &mut R,
    ) -> Result<()> {
        if !(t_next > state.time) {
            return Err(Error::invalid(format!(
                "prediction target {t_next} is not after the current time {}",
                state.time
            )));
        }
        let t0 = state.time;
        let d = self.model.state_dim();
        let model = &self.model;
        let integrator = self.integrator;
        let solves: Vec<usize> = state
            .candidates
            .par_iter_mut()
            .enumerate()
            .map_init(
                || Dopri5::new(d, integrator),
                |stepper, (j, cand)| -> Result<usize> {
                    let (_, weights) = sigma_points(&cand.mean, &cand.covariance)?;
                    let mut count = 0;
                    for (e, chi) in cand.sigma_points.iter_mut().enumerate() {
                        stepper
                            .integrate(model, chi.as_mut_slice(), t0, t_next)
                            .map_err(|err| Error::Integration {
                                t: t_next,
                                reason: format!("candidate {j}, sigma point {e}: {err}"),
                            })?;
                        count += 1;
                    }
                    let (mean, cov) = sigma_moments(&cand.sigma_points, &weights);
                    cand.predicted_output = weighted_output(model, &cand.sigma_points, &weights);
                    let (fresh, _) = sigma_points(&mean, &cov)?;
                    cand.mean = mean;
                    cand.covariance = cov;
                    cand.sigma_points = fresh;
                    Ok(count)
                },
            )
            .collect::<Result<_>>()?;
        let total: usize = solves.iter().sum();
        state.last_step_solves = total;
        state.ode_solves += total;
        state.time = t_next;
        state.resampled = false;
        let outputs = state.outputs();
        state.predicted_output_gmd =
            self.fit_outputs(&outputs, Some(&state.predicted_output_gmd), rng)?;
        Ok(())
    }

    /// Combines the prediction with the measured output density.
    pub fn update(&self, state: &mut CharState, measured: &Gmd) -> Result<()> {
        let dy = self.model.output_dim();
        if measured.dim() != dy {
            return Err(Error::Dimension {
                expected: dy,
                got: measured.dim(),
            });
        }
        let floor = DENSITY_FLOOR.ln();
        let log_meas: Vec<f64> = state
            .candidates
            .iter()
            .map(|c| measured.log_pdf(c.predicted_output.as_slice()))
            .collect();
        let n = log_meas.len() as f64;
        if log_meas.iter().all(|&l| !(l >= floor)) {
            state.warnings.push(format!(
                "t = {}: every candidate output lies outside the measured density; using uniform weights",
                state.time
            ));
            for c in &mut state.candidates {
                c.mixing_proportion = 1.0 / n;
            }
        } else {
            let log_w: Vec<f64> = state
                .candidates
                .iter()
                .zip(&log_meas)
                .map(|(c, &lm)| {
                    let lm = lm.max(floor);
                    match self.cfg.update_rule {
                        UpdateRule::Likelihood => lm,
                        UpdateRule::DensityRatio => {
                            let lp = state
                                .predicted_output_gmd
                                .log_pdf(c.predicted_output.as_slice());
                            lm - lp.max(floor)
                        }
                    }
                })
                .collect();
            let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
            let sum: f64 = w.iter().sum();
            for (c, v) in state.candidates.iter_mut().zip(w) {
                c.mixing_proportion = v / sum;
            }
        }
        state.posterior_gmd = self.kernel_posterior(&state.candidates, measured.total_count())?;
        let outputs = state.outputs();
        state.last_kl = kl_mc(&outputs, &state.predicted_output_gmd, measured)?;
        Ok(())
    }

    /// Redraws candidates from the posterior when the last divergence is
    /// above the threshold. Returns whether resampling happened.
    pub fn maybe_resample<R: Rng + ?Sized>(
        &self,
        state: &mut CharState,
        rng: &mut R,
    ) -> Result<bool> {
        if state.last_kl > self.cfg.d_kl_max {
            let means = state.posterior_gmd.sample(self.cfg.n_cand, rng)?;
            state.candidates = self.fresh_candidates(means)?;
            state.resampled = true;
        } else {
            state.resampled = false;
        }
        Ok(state.resampled)
    }

    /// Refits the predicted output density to the current candidates
    /// without propagating them, returning the new divergence from
    /// `measured`.
    pub fn refit_output<R: Rng + ?Sized>(
        &self,
        state: &mut CharState,
        measured: &Gmd,
        rng: &mut R,
    ) -> Result<f64> {
        let outputs = state.outputs();
        state.predicted_output_gmd =
            self.fit_outputs(&outputs, Some(&state.predicted_output_gmd), rng)?;
        kl_mc(&outputs, &state.predicted_output_gmd, measured)
    }

    pub fn estimate_marginal(&self, state: &CharState, dims: &[usize]) -> Result<Gmd> {
        state.posterior_gmd.marginalize(dims)
    }

    /// One full cycle: predict, update, record, then possibly resample.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut CharState,
        t_next: f64,
        measured: &Gmd,
        rng: &mut R,
    ) -> Result<CharStepRecord> {
        self.predict(state, t_next, rng)?;
        self.update(state, measured)?;
        let kl = state.last_kl;
        let resampled = self.maybe_resample(state, rng)?;
        Ok(CharStepRecord {
            t: t_next,
            resampled,
            kl,
            posterior_gmd: state.posterior_gmd.clone(),
            marginals: self.marginals(state)?,
        })
    }

    /// Record of the current state without advancing it.
    pub fn record(&self, state: &CharState) -> Result<CharStepRecord> {
        Ok(CharStepRecord {
            t: state.time,
            resampled: state.resampled,
            kl: state.last_kl,
            posterior_gmd: state.posterior_gmd.clone(),
            marginals: self.marginals(state)?,
        })
    }

    fn marginals(&self, state: &CharState) -> Result<Vec<Gmd>> {
        (0..self.model.state_dim())
            .map(|i| self.estimate_marginal(state, &[i]))
            .collect()
    }
}
