//! Expectation maximization for full-covariance Gaussian mixtures.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{Gmd, REG_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub max_iter: usize,
    /// Independent seedings; the fit with the best log-likelihood is kept.
    pub restarts: usize,
    /// Stop once the relative log-likelihood change falls below this.
    pub rel_tol: f64,
}

impl EmConfig {
    pub fn new(components: usize, max_iter: usize) -> Self {
        Self {
            components,
            max_iter,
            restarts: 3,
            rel_tol: 1e-6,
        }
    }
}

/// Diagnostics of the retained EM run.
#[derive(Debug, Clone, Default)]
pub struct EmReport {
    /// Total log-likelihood after every E-step.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart: usize,
    pub warnings: Vec<String>,
}

impl EmReport {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Fits `k` components with the default restart and tolerance settings.
pub fn fit_em<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<Gmd> {
    fit_em_with(points, &EmConfig::new(k, max_iter), rng).map(|(g, _)| g)
}

pub fn fit_em_with<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<(Gmd, EmReport)> {
    let k = cfg.components;
    let data = prepare(points, cfg)?;
    let restarts = if k == 1 { 1 } else { cfg.restarts.max(1) };
    let mut best: Option<(Params, EmReport)> = None;
    let mut failures = Vec::new();
    for restart in 0..restarts {
        let init = seed_params(&data, k, rng);
        match run(&data, init, cfg) {
            Ok((params, mut report)) => {
                report.restart = restart;
                let ll = report.final_log_likelihood();
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| ll > b.final_log_likelihood())
                {
                    best = Some((params, report));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let (params, mut report) = best.ok_or_else(|| {
        Error::Fitting(format!("all EM restarts failed: {}", failures.join("; ")))
    })?;
    report.warnings.extend(failures);
    Ok((params.into_gmd(data.d, data.n as f64)?, report))
}

/// Single EM run started from `init` instead of random seedings. Suited to
/// refitting slowly changing data.
pub fn fit_em_from(points: &[DVector<f64>], init: &Gmd, cfg: &EmConfig) -> Result<(Gmd, EmReport)> {
    let data = prepare(points, cfg)?;
    if init.len() != cfg.components || init.dim() != data.d {
        return Err(Error::invalid(format!(
            "warm start has {} components in {} dimensions, expected {} in {}",
            init.len(),
            init.dim(),
            cfg.components,
            data.d
        )));
    }
    let d = data.d;
    let params = Params {
        weights: init.weights(),
        means: init
            .components()
            .iter()
            .flat_map(|c| c.mean().iter().copied().collect::<Vec<_>>())
            .collect(),
        covs: init
            .components()
            .iter()
            .flat_map(|c| {
                let cov = c.covariance();
                (0..d * d).map(move |i| cov[(i / d, i % d)])
            })
            .collect(),
    };
    let (params, report) = run(&data, params, cfg)?;
    Ok((params.into_gmd(d, data.n as f64)?, report))
}

fn prepare(points: &[DVector<f64>], cfg: &EmConfig) -> Result<Data> {
    let k = cfg.components;
    if k == 0 || cfg.max_iter == 0 {
        return Err(Error::invalid("EM needs k >= 1 and max_iter >= 1"));
    }
    let n = points.len();
    let d = points.first().map_or(0, |p| p.len());
    if d == 0 {
        return Err(Error::invalid("EM needs nonempty points"));
    }
    if n < k * (d + 1) {
        return Err(Error::invalid(format!(
            "EM with {k} components in {d} dimensions needs at least {} points, got {n}",
            k * (d + 1)
        )));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::invalid("points differ in dimension"));
    }
    let data = Data::new(points);
    if data.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points contain non-finite values"));
    }
    Ok(data)
}

struct Data {
    x: Vec<f64>,
    n: usize,
    d: usize,
}

impl Data {
    fn new(points: &[DVector<f64>]) -> Self {
        let d = points[0].len();
        let x = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self {
            x,
            n: points.len(),
            d,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Clone)]
struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<f64>,
}

impl Params {
    fn into_gmd(self, d: usize, total_count: f64) -> Result<Gmd> {
        let k = self.weights.len();
        let parts = (0..k)
            .map(|l| {
                let mean = DVector::from_column_slice(&self.means[l * d..(l + 1) * d]);
                let cov = DMatrix::from_row_slice(d, d, &self.covs[l * d * d..(l + 1) * d * d]);
                (self.weights[l], mean, cov)
            })
            .collect();
        Gmd::new(parts, total_count)
    }
}

/// Lower Cholesky factor of a flat row-major matrix and `ln sqrt(det)`.
fn cholesky(a: &[f64], d: usize) -> Option<(Vec<f64>, f64)> {
    let mut l = vec![0.0; d * d];
    let mut half_log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i * d + m] * l[j * d + m]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[i * d + i] = v.sqrt();
                half_log_det += l[i * d + i].ln();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some((l, half_log_det))
}

/// Factors `cov` in place, adding growing diagonal jitter until it succeeds.
fn regularized_cholesky(
    cov: &mut [f64],
    d: usize,
    warnings: &mut Vec<String>,
    component: usize,
) -> Result<(Vec<f64>, f64)> {
    if let Some(f) = cholesky(cov, d) {
        return Ok(f);
    }
    let mut jitter = REG_FLOOR;
    for _ in 0..14 {
        for i in 0..d {
            cov[i * d + i] += jitter;
        }
        if let Some(f) = cholesky(cov, d) {
            warnings.push(format!(
                "component {component}: covariance regularized with diagonal jitter {jitter:e}"
            ));
            return Ok(f);
        }
        jitter *= 10.0;
    }
    Err(Error::Fitting(format!(
        "component {component} covariance could not be regularized"
    )))
}

/// k-means++ seeding followed by a hard assignment to nearest center.
fn seed_params<R: Rng + ?Sized>(data: &Data, k: usize, rng: &mut R) -> Params {
    let (n, d) = (data.n, data.d);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq(data.row(i), data.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(sq(data.row(i), data.row(next)));
        }
    }

    let assign: Vec<usize> = (0..n)
        .map(|i| {
            (0..k)
                .min_by(|&a, &b| {
                    sq(data.row(i), data.row(centers[a]))
                        .total_cmp(&sq(data.row(i), data.row(centers[b])))
                })
                .expect("k >= 1")
        })
        .collect();

    let global = moments(data, &vec![1.0; n]);
    let mut params = Params {
        weights: vec![0.0; k],
        means: vec![0.0; k * d],
        covs: vec![0.0; k * d * d],
    };
    for l in 0..k {
        let resp: Vec<f64> = assign
            .iter()
            .map(|&a| if a == l { 1.0 } else { 0.0 })
            .collect();
        let count: f64 = resp.iter().sum();
        params.weights[l] = count.max(1.0) / n as f64;
        if count >= (d + 1) as f64 {
            let (mean, cov) = moments(data, &resp);
            params.means[l * d..(l + 1) * d].copy_from_slice(&mean);
            params.covs[l * d * d..(l + 1) * d * d].copy_from_slice(&cov);
        } else {
            params.means[l * d..(l + 1) * d].copy_from_slice(data.row(centers[l]));
            params.covs[l * d * d..(l + 1) * d * d].copy_from_slice(&global.1);
        }
    }
    params
}

/// Weighted mean and (maximum-likelihood) covariance.
fn moments(data: &Data, resp: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = data.d;
    let total: f64 = resp.iter().sum();
    let mut mean = vec![0.0; d];
    for (i, &r) in resp.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(data.row(i)) {
            *m += r * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = vec![0.0; d * d];
    for (i, &r) in resp.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let x = data.row(i);
        for a in 0..d {
            let da = x[a] - mean[a];
            for b in 0..=a {
                cov[a * d + b] += r * da * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov[a * d + b] / total;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

/// Responsibilities into `resp`; returns the total log-likelihood. Called
/// with literal `d` for small dimensions so the loops unroll.
#[inline(always)]
fn e_step(
    data: &Data,
    means: &[f64],
    factors: &[(Vec<f64>, f64)],
    resp: &mut [f64],
    d: usize,
) -> f64 {
    let k = factors.len();
    let mut z = [0.0; 8];
    let mut z_heap = vec![0.0; if d > 8 { d } else { 0 }];
    let mut ll = 0.0;
    for i in 0..data.n {
        let x = &data.x[i * d..(i + 1) * d];
        let row = &mut resp[i * k..(i + 1) * k];
        let mut max = f64::NEG_INFINITY;
        for (l, (chol, c)) in factors.iter().enumerate() {
            let mean = &means[l * d..(l + 1) * d];
            let z = if d > 8 { &mut z_heap[..] } else { &mut z[..d] };
            let mut q = 0.0;
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..a {
                    s += chol[a * d + b] * z[b];
                }
                z[a] = (x[a] - mean[a] - s) / chol[a * d + a];
                q += z[a] * z[a];
            }
            row[l] = c - 0.5 * q;
            max = max.max(row[l]);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        ll += max + sum.ln();
    }
    ll
}

/// Responsibility totals, and per-component lower-triangle scatter
/// matrices followed by the means, all in one buffer.
#[inline(always)]
fn m_step_sums(data: &Data, resp: &[f64], k: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.n;
    let mut nk = vec![0.0; k];
    let mut mu = vec![0.0; k * d];
    for i in 0..n {
        let x = &data.x[i * d..(i + 1) * d];
        for l in 0..k {
            let r = resp[i * k + l];
            nk[l] += r;
            for a in 0..d {
                mu[l * d + a] += r * x[a];
            }
        }
    }
    for l in 0..k {
        if nk[l] > 0.0 {
            mu[l * d..(l + 1) * d].iter_mut().for_each(|m| *m /= nk[l]);
        }
    }
    let mut out = vec![0.0; k * d * d + k * d];
    let (cov, means) = out.split_at_mut(k * d * d);
    means.copy_from_slice(&mu);
    for i in 0..n {
        let x = &data.x[i * d..(i + 1) * d];
        for l in 0..k {
            let r = resp[i * k + l];
            if r == 0.0 {
                continue;
            }
            let m = &mu[l * d..(l + 1) * d];
            let c = &mut cov[l * d * d..(l + 1) * d * d];
            for a in 0..d {
                let da = r * (x[a] - m[a]);
                for b in 0..=a {
                    c[a * d + b] += da * (x[b] - m[b]);
                }
            }
        }
    }
    (nk, out)
}

fn run(data: &Data, mut params: Params, cfg: &EmConfig) -> Result<(Params, EmReport)> {
    let (n, d) = (data.n, data.d);
    let k = params.weights.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut report = EmReport::default();
    let mut resp = vec![0.0; n * k];

    for iter in 0..=cfg.max_iter {
        // E-step.
        let mut factors = Vec::with_capacity(k);
        for l in 0..k {
            let cov = &mut params.covs[l * d * d..(l + 1) * d * d];
            let (chol, half_log_det) = regularized_cholesky(cov, d, &mut report.warnings, l)?;
            let log_w = if params.weights[l] > 0.0 {
                params.weights[l].ln()
            } else {
                f64::NEG_INFINITY
            };
            factors.push((chol, log_w - 0.5 * d as f64 * ln_2pi - half_log_det));
        }
        let ll = match d {
            1 => e_step(data, &params.means, &factors, &mut resp, 1),
            2 => e_step(data, &params.means, &factors, &mut resp, 2),
            3 => e_step(data, &params.means, &factors, &mut resp, 3),
            _ => e_step(data, &params.means, &factors, &mut resp, d),
        };
        if !ll.is_finite() {
            return Err(Error::Fitting(format!(
                "non-finite log-likelihood at iteration {iter}"
            )));
        }
        if let Some(&prev) = report.log_likelihood.last() {
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                report.warnings.push(format!(
                    "log-likelihood decreased at iteration {iter}: {prev} -> {ll}"
                ));
            }
            report.log_likelihood.push(ll);
            if (ll - prev).abs() < cfg.rel_tol * prev.abs() {
                report.converged = true;
                break;
            }
        } else {
            report.log_likelihood.push(ll);
        }
        if iter == cfg.max_iter {
            break;
        }

        // M-step, accumulating all components in two passes over the data.
        report.iterations = iter + 1;
        let (nk, mut cov) = match d {
            1 => m_step_sums(data, &resp, k, 1),
            2 => m_step_sums(data, &resp, k, 2),
            3 => m_step_sums(data, &resp, k, 3),
            _ => m_step_sums(data, &resp, k, d),
        };
        let mu = cov.split_off(k * d * d);
        for l in 0..k {
            if nk[l] < 1e-12 * n as f64 {
                report.warnings.push(format!(
                    "component {l} lost all responsibility; weight set to 0"
                ));
                params.weights[l] = 0.0;
                continue;
            }
            let degenerate = nk[l] < (d + 1) as f64;
            if degenerate {
                report.warnings.push(format!(
                    "component {l} is degenerate ({:.3} effective points in {d} dimensions)",
                    nk[l]
                ));
            }
            let c = &mut cov[l * d * d..(l + 1) * d * d];
            for a in 0..d {
                for b in 0..=a {
                    let v = c[a * d + b] / nk[l];
                    c[a * d + b] = v;
                    c[b * d + a] = v;
                }
                if degenerate {
                    c[a * d + a] += REG_FLOOR;
                }
            }
            params.weights[l] = nk[l] / n as f64;
            params.means[l * d..(l + 1) * d].copy_from_slice(&mu[l * d..(l + 1) * d]);
            params.covs[l * d * d..(l + 1) * d * d].copy_from_slice(c);
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = Gmd::single(dvector![1.0, -2.0], dmatrix![0.5, 0.2; 0.2, 0.3]).unwrap();
        let pts = src.sample(400, &mut rng).unwrap();
        let n = pts.len() as f64;
        let mean = pts.iter().fold(DVector::zeros(2), |a, p| a + p) / n;
        let cov = pts.iter().fold(DMatrix::zeros(2, 2), |a, p| {
            a + (p - &mean) * (p - &mean).transpose()
        }) / n;
        let fit = fit_em(&pts, 1, 50, &mut rng).unwrap();
        let c = &fit.components()[0];
        assert!((c.mean() - &mean).amax() < 1e-12);
        assert!((c.covariance() - &cov).amax() < 1e-12);
        assert_eq!(fit.total_count(), 400.0);
    }

    #[test]
    fn recovers_well_separated_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = Gmd::new(
            vec![
                (0.5, dvector![0.0], dmatrix![0.25]),
                (0.5, dvector![4.0], dmatrix![0.25]),
            ],
            1.0,
        )
        .unwrap();
        let pts = src.sample(5000, &mut rng).unwrap();
        let (fit, report) = fit_em_with(&pts, &EmConfig::new(2, 200), &mut rng).unwrap();
        let mut comps: Vec<_> = fit.components().iter().collect();
        comps.sort_by(|a, b| a.mean()[0].total_cmp(&b.mean()[0]));
        assert_abs_diff_eq!(comps[0].mean()[0], 0.0, epsilon = 0.1);
        assert_abs_diff_eq!(comps[1].mean()[0], 4.0, epsilon = 0.1);
        assert_abs_diff_eq!(comps[0].weight(), 0.5, epsilon = 0.05);
        assert!(report.converged);
    }

    #[test]
    fn log_likelihood_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = Gmd::new(
            vec![
                (0.3, dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.5, 1.0]),
                (0.3, dvector![1.0, 2.0], dmatrix![0.3, 0.0; 0.0, 0.3]),
                (0.4, dvector![-2.0, 1.0], dmatrix![0.4, -0.2; -0.2, 0.6]),
            ],
            1.0,
        )
        .unwrap();
        let pts = src.sample(600, &mut rng).unwrap();
        let (_, report) = fit_em_with(&pts, &EmConfig::new(3, 300), &mut rng).unwrap();
        for w in report.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn collapsed_data_puts_every_component_on_the_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = vec![dvector![2.5]; 300];
        let (fit, report) = fit_em_with(&pts, &EmConfig::new(3, 100), &mut rng).unwrap();
        for c in fit.components() {
            assert!((c.mean()[0] - 2.5).abs() < 1e-6);
        }
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn too_few_points_is_an_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<_> = (0..5).map(|i| dvector![i as f64]).collect();
        assert!(matches!(
            fit_em(&pts, 3, 10, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(fit_em(&pts, 0, 10, &mut rng).is_err());
        assert!(fit_em(&pts, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let src = Gmd::new(
            vec![
                (0.5, dvector![0.0], dmatrix![1.0]),
                (0.5, dvector![2.0], dmatrix![0.5]),
            ],
            1.0,
        )
        .unwrap();
        let pts = src.sample(300, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = fit_em(&pts, 3, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = fit_em(&pts, 3, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
