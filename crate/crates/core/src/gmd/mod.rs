//! Gaussian mixture densities.
//!
//! Every continuous density in the crate, whether a fitted measurement, an
//! estimator posterior, or a reference kernel estimate, is a [`Gmd`].
//! Component weights always sum to one; `total_count` carries the number of
//! cells the density stands for, so `total_count * eval(x)` is the NDF value.

mod em;

pub use em::{fit_em, fit_em_from, fit_em_with, EmConfig, EmReport};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added when a covariance fails to factor.
pub const REG_FLOOR: f64 = 1e-10;
/// Densities are clamped to this before taking logarithms.
pub const DENSITY_FLOOR: f64 = 1e-300;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Sample set in state or measurement space.
pub type SamplePoints = Vec<DVector<f64>>;

/// One weighted multivariate normal with its cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    // Row-major lower-triangular factor.
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    /// Builds a component, adding [`REG_FLOOR`] to the diagonal once if the
    /// covariance does not factor. `index` is only used in the error.
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        index: usize,
    ) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!(
                "component {index} has invalid weight {weight}"
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "component {index} has non-finite parameters"
            )));
        }
        let covariance = (&covariance + covariance.transpose()) * 0.5;
        let factor = match covariance.clone().cholesky() {
            Some(c) => Some((c, covariance)),
            None => {
                let reg = &covariance + DMatrix::identity(d, d) * REG_FLOOR;
                reg.clone().cholesky().map(|c| (c, reg))
            }
        };
        let (chol, covariance) = factor.ok_or(Error::NotPositiveDefinite { component: index })?;
        let l = chol.l();
        let mut flat = vec![0.0; d * d];
        let mut log_det_half = 0.0;
        for i in 0..d {
            for j in 0..=i {
                flat[i * d + j] = l[(i, j)];
            }
            log_det_half += l[(i, i)].ln();
        }
        Ok(Self {
            weight,
            mean,
            covariance,
            chol: flat,
            log_norm: -0.5 * d as f64 * LN_2PI - log_det_half,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log of the normal density (without the mixture weight).
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        if d == 1 {
            let z = (x[0] - self.mean[0]) / self.chol[0];
            return self.log_norm - 0.5 * z * z;
        }
        let mut z = [0.0f64; 8];
        let mut heap;
        let z: &mut [f64] = if d <= 8 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i];
            let s: f64 = row.iter().zip(z.iter()).map(|(l, v)| l * v).sum();
            z[i] = (x[i] - self.mean[i] - s) / self.chol[i * d + i];
            q += z[i] * z[i];
        }
        self.log_norm - 0.5 * q
    }

    /// `mean + L * xi` for a standard-normal vector `xi`.
    fn transform(&self, xi: &[f64]) -> DVector<f64> {
        let d = self.mean.len();
        DVector::from_fn(d, |i, _| {
            self.mean[i] + (0..=i).map(|j| self.chol[i * d + j] * xi[j]).sum::<f64>()
        })
    }
}

/// Weighted sum of multivariate normals with a cell-count scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GmdRecord", into = "GmdRecord")]
pub struct Gmd {
    components: Vec<GaussianComponent>,
    dim: usize,
    total_count: f64,
}

/// Serialized layout of a [`Gmd`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GmdRecord {
    pub dim: usize,
    pub total_count: f64,
    pub components: Vec<ComponentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentRecord {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl TryFrom<GmdRecord> for Gmd {
    type Error = Error;

    fn try_from(rec: GmdRecord) -> Result<Self> {
        let parts = rec
            .components
            .into_iter()
            .map(|c| {
                let d = c.mean.len();
                if c.covariance.len() != d || c.covariance.iter().any(|r| r.len() != d) {
                    return Err(Error::invalid("covariance shape does not match mean"));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| c.covariance[i][j]);
                Ok((c.weight, DVector::from_vec(c.mean), cov))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = Gmd::assemble(parts, rec.total_count, false)?;
        let sum: f64 = g.components.iter().map(|c| c.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("stored weights sum to {sum}")));
        }
        if g.dim != rec.dim {
            return Err(Error::Dimension {
                expected: rec.dim,
                got: g.dim,
            });
        }
        Ok(g)
    }
}

impl From<Gmd> for GmdRecord {
    fn from(g: Gmd) -> Self {
        GmdRecord {
            dim: g.dim,
            total_count: g.total_count,
            components: g
                .components
                .iter()
                .map(|c| ComponentRecord {
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    covariance: c
                        .covariance
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

impl Gmd {
    /// Builds a mixture from `(weight, mean, covariance)` triples. Weights
    /// are normalized to sum to one.
    pub fn new(parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>, total_count: f64) -> Result<Self> {
        Self::assemble(parts, total_count, true)
    }

    // Stored mixtures skip renormalization so a JSON round trip is exact.
    fn assemble(
        parts: Vec<(f64, DVector<f64>, DMatrix<f64>)>,
        total_count: f64,
        normalize: bool,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        if !(total_count >= 0.0 && total_count.is_finite()) {
            return Err(Error::invalid(format!("invalid total count {total_count}")));
        }
        let dim = parts[0].1.len();
        if dim == 0 {
            return Err(Error::invalid("zero-dimensional mixture"));
        }
        let mut components = Vec::with_capacity(parts.len());
        for (i, (w, mean, cov)) in parts.into_iter().enumerate() {
            if mean.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: mean.len(),
                });
            }
            components.push(GaussianComponent::new(w, mean, cov, i)?);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0) {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        if normalize {
            for c in &mut components {
                c.weight /= total;
            }
        }
        Ok(Self {
            components,
            dim,
            total_count,
        })
    }

    /// Single normal with unit count.
    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![(1.0, mean, covariance)], 1.0)
    }

    /// Kernel mixture: one component per center, all sharing `bandwidth`.
    pub fn from_kernels(
        centers: &[DVector<f64>],
        weights: &[f64],
        bandwidth: &DMatrix<f64>,
        total_count: f64,
    ) -> Result<Self> {
        if centers.len() != weights.len() {
            return Err(Error::invalid("centers and weights differ in length"));
        }
        let parts = centers
            .iter()
            .zip(weights)
            .map(|(c, &w)| (w, c.clone(), bandwidth.clone()))
            .collect();
        Self::new(parts, total_count)
    }

    /// Gaussian kernel density estimate with Scott's-rule bandwidth.
    pub fn kde(points: &[DVector<f64>], scale: f64) -> Result<Self> {
        let bw = scotts_bandwidth(points, scale)?;
        let w = vec![1.0; points.len()];
        Self::from_kernels(points, &w, &bw, points.len() as f64)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn total_count(&self) -> f64 {
        self.total_count
    }

    pub fn with_total_count(mut self, total_count: f64) -> Self {
        self.total_count = total_count;
        self
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Count-normalized density at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.pdf(x))
    }

    /// [`Gmd::eval`] without the dimension check.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * c.log_pdf(x).exp())
            .sum()
    }

    /// Log-density via log-sum-exp, accurate far in the tails.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            if c.weight > 0.0 {
                let t = c.weight.ln() + c.log_pdf(x);
                max = max.max(t);
                terms.push(t);
            }
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Evaluates a one-dimensional mixture on `n` equally spaced nodes in
    /// `[lo, hi]`, skipping each component beyond nine standard deviations.
    pub fn eval_on_uniform_grid_1d(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        if self.dim != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: self.dim,
            });
        }
        if n < 2 || !(hi > lo) {
            return Err(Error::invalid("uniform grid needs n >= 2 and hi > lo"));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut out = vec![0.0; n];
        for c in &self.components {
            if c.weight == 0.0 {
                continue;
            }
            let mu = c.mean[0];
            let sd = c.chol[0];
            let a = (((mu - 9.0 * sd) - lo) / step).floor().max(0.0);
            let b = (((mu + 9.0 * sd) - lo) / step).ceil().min((n - 1) as f64);
            if b < a {
                continue;
            }
            let scale = c.weight * c.log_norm.exp();
            for (i, slot) in out
                .iter_mut()
                .enumerate()
                .take(b as usize + 1)
                .skip(a as usize)
            {
                let z = (lo + i as f64 * step - mu) / sd;
                *slot += scale * (-0.5 * z * z).exp();
            }
        }
        Ok(out)
    }

    /// Mixture mean.
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    /// Mixture covariance (law of total covariance).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        self.components
            .iter()
            .fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
                let d = &c.mean - &mu;
                acc + (&c.covariance + &d * d.transpose()) * c.weight
            })
    }

    /// `n` i.i.d. draws: component by weight, then a correlated normal.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SamplePoints> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let cumulative: Vec<f64> = self
            .components
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight;
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().expect("nonempty");
        let mut xi = vec![0.0; self.dim];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * total;
            let idx = cumulative
                .partition_point(|&c| c <= u)
                .min(self.components.len() - 1);
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            out.push(self.components[idx].transform(&xi));
        }
        Ok(out)
    }

    /// Exact marginal over the coordinates in `dims` (in the given order).
    pub fn marginalize(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("marginal needs at least one dimension"));
        }
        let mut seen = vec![false; self.dim];
        for &d in dims {
            if d >= self.dim || seen[d] {
                return Err(Error::invalid(format!(
                    "marginal dimension {d} invalid for a {}-dimensional mixture",
                    self.dim
                )));
            }
            seen[d] = true;
        }
        let k = dims.len();
        let parts = self
            .components
            .iter()
            .map(|c| {
                let mean = DVector::from_fn(k, |i, _| c.mean[dims[i]]);
                let cov = DMatrix::from_fn(k, k, |i, j| c.covariance[(dims[i], dims[j])]);
                (c.weight, mean, cov)
            })
            .collect();
        Self::new(parts, self.total_count)
    }

    /// Average log-density of `points`, the EM objective divided by `n`.
    pub fn mean_log_likelihood(&self, points: &[DVector<f64>]) -> f64 {
        points
            .iter()
            .map(|p| self.log_pdf(p.as_slice()))
            .sum::<f64>()
            / points.len() as f64
    }
}

fn check_points(points: &[DVector<f64>], min: usize) -> Result<usize> {
    if points.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: p.len(),
        });
    }
    Ok(d)
}

/// Scott's rule: `h_i = scale * sd_i * n^(-1/(d+4))`, returned as the
/// diagonal covariance `diag(h_i^2)`. Zero-variance axes are floored at
/// [`REG_FLOOR`].
pub fn scotts_bandwidth(points: &[DVector<f64>], scale: f64) -> Result<DMatrix<f64>> {
    let d = check_points(points, 2)?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("invalid bandwidth scale {scale}")));
    }
    let n = points.len() as f64;
    let factor = n.powf(-1.0 / (d as f64 + 4.0));
    let mut bw = DMatrix::zeros(d, d);
    for i in 0..d {
        let mean = points.iter().map(|p| p[i]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let h = scale * var.sqrt() * factor;
        bw[(i, i)] = (h * h).max(REG_FLOOR);
    }
    Ok(bw)
}

/// Monte Carlo estimate of `KL(p || q)` from samples of `p`. Returns
/// `+inf` when every sample falls below the density floor under `q`.
pub fn kl_mc(samples: &[DVector<f64>], p: &Gmd, q: &Gmd) -> Result<f64> {
    if p.dim != q.dim {
        return Err(Error::Dimension {
            expected: p.dim,
            got: q.dim,
        });
    }
    check_points(samples, 1)?;
    if samples[0].len() != p.dim {
        return Err(Error::Dimension {
            expected: p.dim,
            got: samples[0].len(),
        });
    }
    let mut sum = 0.0;
    let mut supported = false;
    for x in samples {
        let px = p.pdf(x.as_slice()).max(DENSITY_FLOOR);
        let qx_raw = q.pdf(x.as_slice());
        if qx_raw >= DENSITY_FLOOR {
            supported = true;
        }
        sum += px.ln() - qx_raw.max(DENSITY_FLOOR).ln();
    }
    if !supported {
        return Ok(f64::INFINITY);
    }
    Ok(sum / samples.len() as f64)
}

/// Closed-form KL divergence between two single normals.
pub fn gaussian_kl_closed_form(p: &Gmd, q: &Gmd) -> Result<f64> {
    if p.len() != 1 || q.len() != 1 {
        return Err(Error::invalid(
            "closed-form KL needs single-component mixtures",
        ));
    }
    if p.dim != q.dim {
        return Err(Error::Dimension {
            expected: p.dim,
            got: q.dim,
        });
    }
    let (a, b) = (&p.components[0], &q.components[0]);
    let d = p.dim as f64;
    let q_chol = b
        .covariance
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { component: 0 })?;
    let q_inv = q_chol.inverse();
    let diff = &b.mean - &a.mean;
    let trace = (&q_inv * &a.covariance).trace();
    let maha = (diff.transpose() * &q_inv * &diff)[(0, 0)];
    // log_norm = -d/2 ln 2pi - 1/2 ln det.
    let log_det_ratio = 2.0 * (a.log_norm - b.log_norm);
    Ok(0.5 * (trace + maha - d + log_det_ratio))
}
