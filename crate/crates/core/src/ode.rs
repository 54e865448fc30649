//! Adaptive Dormand–Prince 5(4) integrator for autonomous systems.
//!
//! One integrator serves both the single-cell models and the discretized
//! population balance of the grid filter, so it works on plain slices and
//! keeps its stage buffers between steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Autonomous ODE `dx/dt = f(x)`.
pub trait OdeSystem: Sync {
    fn dim(&self) -> usize;
    fn rhs(&self, x: &[f64], dx: &mut [f64]);
}

/// Step-size control settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step length; `None` lets the controller decide.
    pub max_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            max_step: None,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::Config(
                "integrator tolerances must be strictly positive".into(),
            ));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(Error::Config("integrator max_step must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Counters from one integration call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

const MAX_STEPS: usize = 500_000;

// Stage matrix; autonomous systems never need the nodes.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Difference between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Reusable Dormand–Prince stepper.
pub struct Dopri5 {
    cfg: IntegratorConfig,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    next: Vec<f64>,
}

impl Dopri5 {
    pub fn new(dim: usize, cfg: IntegratorConfig) -> Self {
        Self {
            cfg,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
            next: vec![0.0; dim],
        }
    }

    fn error_norm(&self, x: &[f64], x_new: &[f64], err: &[f64]) -> f64 {
        let n = x.len();
        if n == 0 {
            return 0.0;
        }
        let sum: f64 = (0..n)
            .map(|i| {
                let sc = self.cfg.abs_tol + self.cfg.rel_tol * x[i].abs().max(x_new[i].abs());
                let r = err[i] / sc;
                r * r
            })
            .sum();
        (sum / n as f64).sqrt()
    }

    fn initial_step<S: OdeSystem + ?Sized>(&mut self, sys: &S, x: &[f64], span: f64) -> f64 {
        let n = x.len();
        let sc = |v: f64| self.cfg.abs_tol + self.cfg.rel_tol * v.abs();
        let rms = |f: &dyn Fn(usize) -> f64| {
            ((0..n).map(|i| f(i).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt()
        };
        let f0 = &self.k[0];
        let d0 = rms(&|i| x[i] / sc(x[i]));
        let d1 = rms(&|i| f0[i] / sc(x[i]));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(span);
        for i in 0..n {
            self.tmp[i] = x[i] + h0 * self.k[0][i];
        }
        sys.rhs(&self.tmp, &mut self.k[1]);
        let f0 = &self.k[0];
        let f1 = &self.k[1];
        let d2 = rms(&|i| (f1[i] - f0[i]) / sc(x[i])) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        (100.0 * h0).min(h1).min(span)
    }

    /// Advances `x` in place from `t0` to `t1`.
    pub fn integrate<S: OdeSystem + ?Sized>(
        &mut self,
        sys: &S,
        x: &mut [f64],
        t0: f64,
        t1: f64,
    ) -> Result<IntegrationStats> {
        let n = sys.dim();
        if x.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: x.len(),
            });
        }
        if !(t1 >= t0) {
            return Err(Error::invalid(format!(
                "integration end {t1} precedes start {t0}"
            )));
        }
        let mut stats = IntegrationStats::default();
        if t1 == t0 {
            return Ok(stats);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t: t0,
                reason: "non-finite initial state".into(),
            });
        }
        let span = t1 - t0;
        let max_step = self.cfg.max_step.unwrap_or(f64::INFINITY).min(span);

        sys.rhs(x, &mut self.k[0]);
        stats.rhs_evals += 1;
        let mut h = self.initial_step(sys, x, span).min(max_step);
        stats.rhs_evals += 1;
        let mut t = t0;
        let mut last_rejected = false;

        while t < t1 {
            if stats.accepted + stats.rejected >= MAX_STEPS {
                return Err(Error::Integration {
                    t,
                    reason: format!("exceeded {MAX_STEPS} steps"),
                });
            }
            let remaining = t1 - t;
            let eps = 1e-13 * t1.abs().max(1.0);
            if remaining <= eps {
                break;
            }
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::Integration {
                    t,
                    reason: format!("step size underflow (h = {h:e})"),
                });
            }
            self.stages(sys, x, h);
            stats.rhs_evals += 6;

            // Error estimate reuses tmp as scratch.
            for i in 0..n {
                let [k1, _, k3, k4, k5, k6, k7] = &self.k;
                self.tmp[i] = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            let err = self.error_norm(x, &self.next, &self.tmp);
            if !err.is_finite() || self.next.iter().any(|v| !v.is_finite()) {
                stats.rejected += 1;
                h *= 0.2;
                last_rejected = true;
                continue;
            }
            if err <= 1.0 {
                t = if last { t1 } else { t + h };
                x.copy_from_slice(&self.next);
                // FSAL: the last stage is the derivative at the new point.
                self.k.swap(0, 6);
                stats.accepted += 1;
                let mut fac = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if last_rejected {
                    fac = fac.min(1.0);
                }
                last_rejected = false;
                h = (h * fac).min(max_step);
            } else {
                stats.rejected += 1;
                last_rejected = true;
                h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        Ok(stats)
    }

    fn stages<S: OdeSystem + ?Sized>(&mut self, sys: &S, x: &[f64], h: f64) {
        let n = x.len();
        let (k1, rest) = self.k.split_at_mut(1);
        let k1 = &k1[0];
        let [k2, k3, k4, k5, k6, k7] = rest else {
            unreachable!()
        };
        let tmp = &mut self.tmp;

        for i in 0..n {
            tmp[i] = x[i] + h * A21 * k1[i];
        }
        sys.rhs(tmp, k2);
        for i in 0..n {
            tmp[i] = x[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(tmp, k3);
        for i in 0..n {
            tmp[i] = x[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(tmp, k4);
        for i in 0..n {
            tmp[i] = x[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(tmp, k5);
        for i in 0..n {
            tmp[i] =
                x[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(tmp, k6);
        for i in 0..n {
            self.next[i] =
                x[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(&self.next, k7);
    }
}

/// Convenience wrapper that allocates a stepper for a single call.
pub fn integrate_system<S: OdeSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    Dopri5::new(sys.dim(), *cfg).integrate(sys, &mut x, t0, t1)?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], dx: &mut [f64]) {
            dx[0] = -x[0];
        }
    }

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, x: &[f64], dx: &mut [f64]) {
            dx[0] = x[1];
            dx[1] = -x[0];
        }
    }

    struct Blowup;
    impl OdeSystem for Blowup {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, x: &[f64], dx: &mut [f64]) {
            dx[0] = x[0] * x[0];
        }
    }

    #[test]
    fn exponential_decay() {
        let x = integrate_system(&Decay, &[1.0], 0.0, 3.0, &IntegratorConfig::default()).unwrap();
        assert!((x[0] - (-3.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let cfg = IntegratorConfig::default();
        let x = integrate_system(
            &Oscillator,
            &[1.0, 0.0],
            0.0,
            2.0 * std::f64::consts::PI,
            &cfg,
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5);
        assert!(x[1].abs() < 1e-5);
    }

    #[test]
    fn zero_span_returns_input_exactly() {
        let x0 = [0.123456789];
        let x = integrate_system(&Decay, &x0, 2.0, 2.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn reversed_span_is_rejected() {
        let err = integrate_system(&Decay, &[1.0], 1.0, 0.0, &IntegratorConfig::default());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn finite_time_blowup_fails_with_diagnostic() {
        // x' = x^2 with x(0) = 1 blows up at t = 1.
        let err =
            integrate_system(&Blowup, &[1.0], 0.0, 2.0, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Integration { .. }), "{err}");
    }

    #[test]
    fn respects_max_step() {
        let cfg = IntegratorConfig {
            max_step: Some(0.01),
            ..Default::default()
        };
        let mut x = [1.0];
        let stats = Dopri5::new(1, cfg)
            .integrate(&Decay, &mut x, 0.0, 1.0)
            .unwrap();
        assert!(stats.accepted >= 100);
    }
}
