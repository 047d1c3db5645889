use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::objective::ClientObjective;
use crate::ModelVector;

/// How a stochastic gradient is formed from the exact one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseMode {
    Deterministic,
    /// Exact gradient plus isotropic Gaussian noise whose total second
    /// moment is `sigma_l²` (per-coordinate variance `sigma_l² / d`).
    Gaussian { sigma_l: f64 },
    /// Mean of `batch_size` component gradients drawn uniformly with replacement.
    Minibatch { batch_size: usize },
}

impl Default for NoiseMode {
    fn default() -> Self {
        Self::Deterministic
    }
}

impl NoiseMode {
    pub fn is_deterministic(&self) -> bool {
        match self {
            Self::Deterministic => true,
            Self::Gaussian { sigma_l } => *sigma_l == 0.0,
            Self::Minibatch { .. } => false,
        }
    }
}

/// Stochastic gradient oracle for one client, owning its random stream.
///
/// Gradients are never projected onto the declared bound `G`; a sample whose
/// norm exceeds it is counted as a violation instead.
#[derive(Debug, Clone)]
pub struct GradientOracle<'a> {
    objective: &'a ClientObjective,
    noise: NoiseMode,
    rng: ChaCha8Rng,
    gradient_bound: Option<f64>,
    violations: usize,
}

impl<'a> GradientOracle<'a> {
    pub fn new(
        objective: &'a ClientObjective,
        noise: NoiseMode,
        rng: ChaCha8Rng,
        gradient_bound: Option<f64>,
    ) -> Self {
        Self {
            objective,
            noise,
            rng,
            gradient_bound,
            violations: 0,
        }
    }

    pub fn objective(&self) -> &ClientObjective {
        self.objective
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    /// Number of sampled gradients whose norm exceeded the declared bound.
    pub fn violations(&self) -> usize {
        self.violations
    }

    pub fn sample_gradient(&mut self, x: &ModelVector) -> ModelVector {
        let g = match self.noise {
            NoiseMode::Deterministic => self.objective.gradient(x),
            NoiseMode::Gaussian { sigma_l } => {
                let mut g = self.objective.gradient(x);
                if sigma_l > 0.0 {
                    let std = sigma_l / (g.len() as f64).sqrt();
                    for v in g.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        *v += std * z;
                    }
                }
                g
            }
            NoiseMode::Minibatch { batch_size } => {
                let n = self.objective.num_components();
                let batch: Vec<usize> = (0..batch_size.max(1))
                    .map(|_| self.rng.random_range(0..n))
                    .collect();
                self.objective.batch_gradient(x, &batch)
            }
        };
        if let Some(bound) = self.gradient_bound {
            if g.norm() > bound {
                self.violations += 1;
            }
        }
        g
    }
}
