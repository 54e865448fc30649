//! L1 marginal errors and aggregation over repeated runs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmd::Gmd;
use crate::reference::CellEnsemble;

/// Default trapezoid node count for L1 quadrature.
pub const QUAD_NODES: usize = 4001;

/// Width of the reference padding, in reference bandwidths.
const PAD_BANDWIDTHS: f64 = 4.0;

/// Extent counted as support for a mixture component, in standard deviations.
const GMD_SUPPORT_SD: f64 = 6.0;

/// A one-dimensional marginal density estimate.
#[derive(Debug, Clone)]
pub enum Marginal1d {
    Mixture(Gmd),
    /// Piecewise-constant density on equal cells starting at `lo`.
    Piecewise {
        lo: f64,
        width: f64,
        values: Vec<f64>,
    },
}

impl Marginal1d {
    pub fn mixture(g: Gmd) -> Result<Self> {
        if g.dim() != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: g.dim(),
            });
        }
        Ok(Self::Mixture(g))
    }

    /// Interval outside of which the density is negligible.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Self::Mixture(g) => g.components().iter().filter(|c| c.weight() > 0.0).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), c| {
                    let mu = c.mean()[0];
                    let sd = c.covariance()[(0, 0)].sqrt();
                    (
                        lo.min(mu - GMD_SUPPORT_SD * sd),
                        hi.max(mu + GMD_SUPPORT_SD * sd),
                    )
                },
            ),
            Self::Piecewise { lo, width, values } => (*lo, lo + width * values.len() as f64),
        }
    }

    /// Density at `n` equally spaced nodes of `[lo, hi]`.
    pub fn eval_uniform(&self, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
        match self {
            Self::Mixture(g) => g.eval_on_uniform_grid_1d(lo, hi, n),
            Self::Piecewise {
                lo: a,
                width,
                values,
            } => {
                let step = (hi - lo) / (n - 1) as f64;
                Ok((0..n)
                    .map(|i| {
                        let x = lo + i as f64 * step;
                        let cell = ((x - a) / width).floor();
                        if cell >= 0.0 && (cell as usize) < values.len() {
                            values[cell as usize]
                        } else {
                            0.0
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Trapezoidal L1 distance between two marginals over `[lo, hi]`.
pub fn l1_between(a: &Marginal1d, b: &Marginal1d, lo: f64, hi: f64, nodes: usize) -> Result<f64> {
    if nodes < 2 || !(hi > lo) {
        return Err(Error::invalid("L1 quadrature needs nodes >= 2 and hi > lo"));
    }
    let fa = a.eval_uniform(lo, hi, nodes)?;
    let fb = b.eval_uniform(lo, hi, nodes)?;
    let step = (hi - lo) / (nodes - 1) as f64;
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
    let inner: f64 = diff[1..nodes - 1].iter().sum();
    Ok(step * (inner + 0.5 * (diff[0] + diff[nodes - 1])))
}

/// L1 distance over the union of both supports.
pub fn l1_distance(a: &Marginal1d, b: &Marginal1d, nodes: usize) -> Result<f64> {
    let (a0, a1) = a.support();
    let (b0, b1) = b.support();
    l1_between(a, b, a0.min(b0), a1.max(b1), nodes)
}

/// L1 error of `estimate` against the reference marginal KDE of coordinate
/// `dim`. The quadrature interval spans the reference cells padded by four
/// reference bandwidths, widened to the estimate's support.
pub fn l1_marginal_error(
    estimate: &Marginal1d,
    reference: &CellEnsemble,
    dim: usize,
    nodes: usize,
) -> Result<f64> {
    if reference.cells.is_empty() {
        return Err(Error::invalid("empty reference ensemble"));
    }
    let kde = reference.marginal_kde(dim)?;
    let h = kde.components()[0].covariance()[(0, 0)].sqrt();
    let xs = reference.coordinate(dim);
    let rmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let rmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (e0, e1) = estimate.support();
    let lo = (rmin - PAD_BANDWIDTHS * h).min(e0);
    let hi = (rmax + PAD_BANDWIDTHS * h).max(e1);
    l1_between(estimate, &Marginal1d::Mixture(kde), lo, hi, nodes)
}

/// L1 error of one marginal of a full-state mixture estimate.
pub fn l1_gmd_error(estimate: &Gmd, reference: &CellEnsemble, dim: usize) -> Result<f64> {
    let marginal = if estimate.dim() == 1 {
        estimate.clone()
    } else {
        estimate.marginalize(&[dim])?
    };
    l1_marginal_error(&Marginal1d::Mixture(marginal), reference, dim, QUAD_NODES)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesLabel {
    pub estimator: String,
    pub dim: String,
    pub seed: u64,
}

/// L1 error over time for one estimator, marginal, and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub label: SeriesLabel,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ErrorSeries {
    pub fn new(label: SeriesLabel, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::invalid("times and values differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("error series times must increase"));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("L1 errors must be nonnegative"));
        }
        Ok(Self {
            label,
            times,
            values,
        })
    }

    pub fn time_average(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Pointwise mean and sample standard deviation across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub estimator: String,
    pub dim: String,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_runs: usize,
}

pub fn average_runs(series: &[ErrorSeries]) -> Result<AggregateSeries> {
    let first = series
        .first()
        .ok_or_else(|| Error::invalid("no runs to average"))?;
    if series.iter().any(|s| s.times != first.times) {
        return Err(Error::invalid("runs have different time grids"));
    }
    let n = series.len();
    let len = first.times.len();
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for i in 0..len {
        let m = series.iter().map(|s| s.values[i]).sum::<f64>() / n as f64;
        mean[i] = m;
        if n > 1 {
            let ss: f64 = series.iter().map(|s| (s.values[i] - m).powi(2)).sum();
            std[i] = (ss / (n - 1) as f64).sqrt();
        }
    }
    Ok(AggregateSeries {
        estimator: first.label.estimator.clone(),
        dim: first.label.dim.clone(),
        times: first.times.clone(),
        mean,
        std,
        n_runs: n,
    })
}

/// Writes per-run series as `estimator,time,l1`.
pub fn write_series_csv<W: Write>(mut out: W, series: &[ErrorSeries]) -> Result<()> {
    writeln!(out, "estimator,time,l1")?;
    for s in series {
        for (t, v) in s.times.iter().zip(&s.values) {
            writeln!(out, "{},{t},{v}", s.label.estimator)?;
        }
    }
    Ok(())
}

/// Writes aggregates as `estimator,time,mean,std`, preceded by `# ` comment
/// lines.
pub fn write_aggregate_csv<W: Write>(
    mut out: W,
    comments: &[String],
    series: &[AggregateSeries],
) -> Result<()> {
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "estimator,time,mean,std")?;
    for s in series {
        for i in 0..s.times.len() {
            writeln!(
                out,
                "{},{},{},{}",
                s.estimator, s.times[i], s.mean[i], s.std[i]
            )?;
        }
    }
    Ok(())
}
