use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::MlpObjective;
use crate::ModelVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    ScalarQuadratic,
    LinearRegression,
    MlpSynthetic,
}

/// One client's local objective `f_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientObjective {
    /// `½ (x − b)²` on the real line.
    ScalarQuadratic { b: f64 },
    /// `½ ‖A x − b‖²`.
    LinearRegression { a: DMatrix<f64>, b: DVector<f64> },
    Mlp(MlpObjective),
}

impl ClientObjective {
    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Self::ScalarQuadratic { .. } => ObjectiveKind::ScalarQuadratic,
            Self::LinearRegression { .. } => ObjectiveKind::LinearRegression,
            Self::Mlp(_) => ObjectiveKind::MlpSynthetic,
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::ScalarQuadratic { .. } => 1,
            Self::LinearRegression { a, .. } => a.ncols(),
            Self::Mlp(m) => m.dimension(),
        }
    }

    pub fn loss(&self, x: &ModelVector) -> f64 {
        assert_eq!(x.len(), self.dimension(), "objective dimension");
        match self {
            Self::ScalarQuadratic { b } => 0.5 * (x[0] - b).powi(2),
            Self::LinearRegression { a, b } => 0.5 * (a * x - b).norm_squared(),
            Self::Mlp(m) => m.loss(x),
        }
    }

    pub fn gradient(&self, x: &ModelVector) -> ModelVector {
        assert_eq!(x.len(), self.dimension(), "objective dimension");
        match self {
            Self::ScalarQuadratic { b } => DVector::from_element(1, x[0] - b),
            Self::LinearRegression { a, b } => a.tr_mul(&(a * x - b)),
            Self::Mlp(m) => m.gradient(x),
        }
    }

    /// Number of additive components the full gradient averages over.
    pub fn num_components(&self) -> usize {
        match self {
            Self::ScalarQuadratic { .. } => 1,
            Self::LinearRegression { a, .. } => a.nrows(),
            Self::Mlp(m) => m.num_samples(),
        }
    }

    /// Component gradient, scaled so that the full gradient is the mean over
    /// components. Minibatch estimators built from these are unbiased.
    pub fn component_gradient(&self, x: &ModelVector, idx: usize) -> ModelVector {
        match self {
            Self::ScalarQuadratic { .. } => self.gradient(x),
            Self::LinearRegression { a, b } => {
                let row = a.row(idx);
                let resid = row.dot(&x.transpose()) - b[idx];
                row.transpose() * (resid * a.nrows() as f64)
            }
            Self::Mlp(m) => m.sample_gradient(x, idx),
        }
    }

    pub fn batch_gradient(&self, x: &ModelVector, batch: &[usize]) -> ModelVector {
        match self {
            Self::Mlp(m) => m.batch_gradient(x, batch),
            _ => {
                let sum = batch
                    .iter()
                    .fold(DVector::zeros(self.dimension()), |acc, &i| {
                        acc + self.component_gradient(x, i)
                    });
                sum / batch.len() as f64
            }
        }
    }

    /// `AᵀA` for quadratic objectives (the constant Hessian).
    pub fn gram(&self) -> Option<DMatrix<f64>> {
        match self {
            Self::ScalarQuadratic { .. } => Some(DMatrix::from_element(1, 1, 1.0)),
            Self::LinearRegression { a, .. } => Some(a.tr_mul(a)),
            Self::Mlp(_) => None,
        }
    }

    /// Exact local minimizer when the objective is a strictly convex quadratic.
    pub fn local_minimizer(&self) -> Option<ModelVector> {
        match self {
            Self::ScalarQuadratic { b } => Some(DVector::from_element(1, *b)),
            Self::LinearRegression { a, b } => {
                let gram = a.tr_mul(a);
                gram.cholesky().map(|c| c.solve(&a.tr_mul(b)))
            }
            Self::Mlp(_) => None,
        }
    }
}
