//! Single-cell dynamical systems and their measurement maps.
//!
//! A [`ModelSpec`] is both the right-hand side of the characteristic ODE and
//! the flow-cytometry output projection. Coordinates are ordered as listed on
//! each [`ModelKind`] variant, and every serialized state uses that order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{integrate_system, IntegratorConfig, OdeSystem};

/// A point in cell-state space.
pub type StateVector = DVector<f64>;

/// Values of the measured coordinates of one cell.
pub type MeasurementVector = DVector<f64>;

/// Saturation time-scale divisor in the size-growth model.
const GROWTH_SATURATION_RATE: f64 = 3.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// State `(z, g)`: size and growth rate. Linear growth below `z_star`,
    /// relaxation towards `z_max` above it.
    Growth2d { z_star: f64, z_max: f64 },
    /// State `(z1, z2, k1)`: mRNA, protein, transcription rate.
    GeneExpr3d { k2: f64 },
    /// `dx/dt = A x`.
    Linear { matrix: Vec<Vec<f64>> },
    /// `dx/dt = v`, constant.
    ConstantDrift { velocity: Vec<f64> },
    /// `dx/dt = 0`.
    Stationary { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub measured_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn growth2d(z_star: f64, z_max: f64) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::Growth2d { z_star, z_max },
            measured_dims: vec![0],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Size model with `z* = 3.5`, `z_max = 6`.
    pub fn growth2d_default() -> Self {
        Self::growth2d(3.5, 6.0).expect("valid constants")
    }

    pub fn gene_expr3d(k2: f64) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::GeneExpr3d { k2 },
            measured_dims: vec![1],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Gene expression model with `k2 = 2`.
    pub fn gene_expr3d_default() -> Self {
        Self::gene_expr3d(2.0).expect("valid constants")
    }

    pub fn linear(matrix: Vec<Vec<f64>>, measured_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::Linear { matrix },
            measured_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn constant_drift(velocity: Vec<f64>, measured_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::ConstantDrift { velocity },
            measured_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stationary(dim: usize, measured_dims: Vec<usize>) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::Stationary { dim },
            measured_dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ModelKind::Growth2d { z_star, z_max } => {
                if !(0.0 < *z_star && z_star < z_max && z_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "growth2d requires 0 < z_star < z_max, got z_star = {z_star}, z_max = {z_max}"
                    )));
                }
                if self.measured_dims != [0] {
                    return Err(Error::Config("growth2d measures the size z only".into()));
                }
            }
            ModelKind::GeneExpr3d { k2 } => {
                if !(*k2 > 0.0 && k2.is_finite()) {
                    return Err(Error::Config(format!(
                        "gene_expr3d requires k2 > 0, got {k2}"
                    )));
                }
                if self.measured_dims != [1] {
                    return Err(Error::Config(
                        "gene_expr3d measures the protein concentration z2 only".into(),
                    ));
                }
            }
            ModelKind::Linear { matrix } => {
                let n = matrix.len();
                if n == 0 || matrix.iter().any(|row| row.len() != n) {
                    return Err(Error::Config("linear model needs a square matrix".into()));
                }
            }
            ModelKind::ConstantDrift { velocity } => {
                if velocity.is_empty() {
                    return Err(Error::Config("constant drift needs a velocity".into()));
                }
            }
            ModelKind::Stationary { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("stationary model needs dim >= 1".into()));
                }
            }
        }
        let d = self.state_dim();
        let mut seen = vec![false; d];
        if self.measured_dims.is_empty() {
            return Err(Error::Config(
                "at least one coordinate must be measured".into(),
            ));
        }
        for &m in &self.measured_dims {
            if m >= d || seen[m] {
                return Err(Error::Config(format!(
                    "measured dimension {m} invalid for a {d}-dimensional model"
                )));
            }
            seen[m] = true;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Growth2d { .. } => 2,
            ModelKind::GeneExpr3d { .. } => 3,
            ModelKind::Linear { matrix } => matrix.len(),
            ModelKind::ConstantDrift { velocity } => velocity.len(),
            ModelKind::Stationary { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.measured_dims.len()
    }

    pub fn model_id(&self) -> &'static str {
        match self.kind {
            ModelKind::Growth2d { .. } => "growth2d",
            ModelKind::GeneExpr3d { .. } => "gene_expr3d",
            ModelKind::Linear { .. } => "linear",
            ModelKind::ConstantDrift { .. } => "constant_drift",
            ModelKind::Stationary { .. } => "stationary",
        }
    }

    /// Short coordinate names, used for file names and plot labels.
    pub fn dim_names(&self) -> Vec<String> {
        match self.kind {
            ModelKind::Growth2d { .. } => vec!["z".into(), "g".into()],
            ModelKind::GeneExpr3d { .. } => vec!["z1".into(), "z2".into(), "k1".into()],
            _ => (0..self.state_dim()).map(|i| format!("dim{i}")).collect(),
        }
    }

    /// Whether the physical state space is the nonnegative orthant.
    pub fn nonnegative_states(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::Growth2d { .. } | ModelKind::GeneExpr3d { .. }
        )
    }

    /// Writes `f(x)` into `dx` without dimension checks.
    pub fn eval_field(&self, x: &[f64], dx: &mut [f64]) {
        match &self.kind {
            ModelKind::Growth2d { z_star, z_max } => {
                let (z, g) = (x[0], x[1]);
                dx[0] = if z < *z_star {
                    g
                } else {
                    g / GROWTH_SATURATION_RATE * (z_max - z)
                };
                dx[1] = 0.0;
            }
            ModelKind::GeneExpr3d { k2 } => {
                let (z1, z2, k1) = (x[0], x[1], x[2]);
                dx[0] = k1 - z1;
                dx[1] = k2 * z1 - z2;
                dx[2] = 0.0;
            }
            ModelKind::Linear { matrix } => {
                for (out, row) in dx.iter_mut().zip(matrix) {
                    *out = row.iter().zip(x).map(|(a, v)| a * v).sum();
                }
            }
            ModelKind::ConstantDrift { velocity } => dx.copy_from_slice(velocity),
            ModelKind::Stationary { .. } => dx.fill(0.0),
        }
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        let d = self.state_dim();
        if len != d {
            return Err(Error::Dimension {
                expected: d,
                got: len,
            });
        }
        Ok(())
    }

    /// Time derivative of a single cell's state.
    pub fn vector_field(&self, x: &StateVector) -> Result<StateVector> {
        self.check_dim(x.len())?;
        let mut dx = DVector::zeros(x.len());
        self.eval_field(x.as_slice(), dx.as_mut_slice());
        Ok(dx)
    }

    /// Projection onto the measured coordinates.
    pub fn measure(&self, x: &StateVector) -> MeasurementVector {
        DVector::from_iterator(
            self.measured_dims.len(),
            self.measured_dims.iter().map(|&i| x[i]),
        )
    }

    /// Flow map of the single-cell ODE from `t0` to `t1`.
    pub fn integrate(
        &self,
        x0: &StateVector,
        t0: f64,
        t1: f64,
        cfg: &IntegratorConfig,
    ) -> Result<StateVector> {
        self.check_dim(x0.len())?;
        if t1 == t0 {
            return Ok(x0.clone());
        }
        let x = integrate_system(self, x0.as_slice(), t0, t1, cfg)?;
        Ok(DVector::from_vec(x))
    }

    /// System matrix for linear models, `None` otherwise.
    pub fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        match &self.kind {
            ModelKind::Linear { matrix } => {
                let n = matrix.len();
                Some(DMatrix::from_fn(n, n, |i, j| matrix[i][j]))
            }
            ModelKind::Stationary { dim } => Some(DMatrix::zeros(*dim, *dim)),
            _ => None,
        }
    }
}

impl OdeSystem for ModelSpec {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn rhs(&self, x: &[f64], dx: &mut [f64]) {
        self.eval_field(x, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    #[test]
    fn growth_linear_branch() {
        let m = ModelSpec::growth2d_default();
        let dx = m.vector_field(&dvector![1.5, 0.5]).unwrap();
        assert_eq!(dx, dvector![0.5, 0.0]);
    }

    #[test]
    fn growth_saturation_fixed_point() {
        let m = ModelSpec::growth2d_default();
        let dx = m.vector_field(&dvector![6.0, 0.5]).unwrap();
        assert_eq!(dx, dvector![0.0, 0.0]);
    }

    #[test]
    fn growth_field_jumps_at_threshold() {
        // Below the threshold the size grows at rate g; at the threshold the
        // saturation branch gives g (z_max - z*) / 3.5 instead.
        let m = ModelSpec::growth2d_default();
        let below = m.vector_field(&dvector![3.5 - 1e-12, 0.7]).unwrap();
        let at = m.vector_field(&dvector![3.5, 0.7]).unwrap();
        assert_abs_diff_eq!(below[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(at[0], 0.7 * 2.5 / 3.5, epsilon = 1e-15);
    }

    #[test]
    fn gene_expression_field() {
        let m = ModelSpec::gene_expr3d_default();
        let dx = m.vector_field(&dvector![1.0, 1.0, 2.0]).unwrap();
        assert_eq!(dx, dvector![1.0, 1.0, 0.0]);
    }

    #[test]
    fn gene_expression_fixed_point_residual_is_zero() {
        let m = ModelSpec::gene_expr3d_default();
        let k1 = 1.7;
        let dx = m.vector_field(&dvector![k1, 2.0 * k1, k1]).unwrap();
        assert_eq!(dx, dvector![0.0, 0.0, 0.0]);
    }

    #[test]
    fn field_rejects_wrong_dimension() {
        let m = ModelSpec::growth2d_default();
        let err = m.vector_field(&dvector![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 2,
                got: 3
            }
        ));
    }

    #[test]
    fn measurement_projections() {
        let g = ModelSpec::growth2d_default();
        assert_eq!(g.measure(&dvector![2.1, 0.4]), dvector![2.1]);
        let e = ModelSpec::gene_expr3d_default();
        assert_eq!(e.measure(&dvector![1.0, 1.7, 2.0]), dvector![1.7]);
        let full = ModelSpec::stationary(3, vec![0, 1, 2]).unwrap();
        let x = dvector![0.3, -1.0, 4.0];
        assert_eq!(full.measure(&x), x);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(ModelSpec::growth2d(4.0, 3.0).is_err());
        assert!(ModelSpec::growth2d(0.0, 3.0).is_err());
        assert!(ModelSpec::gene_expr3d(0.0).is_err());
        assert!(ModelSpec::stationary(2, vec![2]).is_err());
        assert!(ModelSpec::stationary(2, vec![0, 0]).is_err());
    }

    #[test]
    fn integrate_linear_growth_closed_form() {
        let m = ModelSpec::growth2d_default();
        let cfg = IntegratorConfig::default();
        let x = m.integrate(&dvector![1.5, 0.5], 0.0, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn integrate_saturation_closed_form() {
        let m = ModelSpec::growth2d_default();
        let cfg = IntegratorConfig::default();
        let x = m.integrate(&dvector![4.0, 0.5], 0.0, 2.0, &cfg).unwrap();
        let expected = 6.0 - 2.0 * (-0.5 * 2.0 / 3.5f64).exp();
        assert_abs_diff_eq!(x[0], expected, epsilon = 1e-6);
        assert_abs_diff_eq!(x[0], 4.497045, epsilon = 1e-6);
        assert_eq!(x[1], 0.5);
    }

    #[test]
    fn integrate_gene_expression_closed_form() {
        // z1(t) = k1 + (z1_0 - k1) e^-t, and variation of constants for z2
        // gives z2(t) = 2 k1 + 2 (z1_0 - k1) t e^-t + (z2_0 - 2 k1) e^-t.
        let m = ModelSpec::gene_expr3d_default();
        let cfg = IntegratorConfig::default();
        let x = m
            .integrate(&dvector![1.0, 1.0, 2.0], 0.0, 1.0, &cfg)
            .unwrap();
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(x[0], 2.0 - e, epsilon = 1e-6);
        assert_abs_diff_eq!(x[1], 4.0 - 5.0 * e, epsilon = 1e-6);
        assert_eq!(x[2], 2.0);
    }

    #[test]
    fn zero_span_is_exact() {
        let m = ModelSpec::gene_expr3d_default();
        let x0 = dvector![0.1, 0.2, 0.3];
        let x = m
            .integrate(&x0, 5.0, 5.0, &IntegratorConfig::default())
            .unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn serde_round_trip_keeps_kind_tag() {
        let m = ModelSpec::growth2d_default();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"kind\":\"growth2d\""), "{text}");
        let back: ModelSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
