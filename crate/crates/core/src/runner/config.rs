use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::RunConfig;
use crate::problems::{
    build_linear_regression_ensemble, build_mlp_synthetic_ensemble, build_quadratic_ensemble,
    slope_ensemble, MlpEnsembleSpec, NoiseMode, ProblemInstance,
};
use crate::rng::{Purpose, StreamKey};
use crate::{Error, Result};

/// Randomly drawn least-squares federation.
///
/// Client `i` gets `A_i` with i.i.d. `N(0, 1/rows)` entries and
/// `b_i = A_i (x_c + h z_i)`, where `x_c` is shared and `z_i ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearRegressionSpec {
    pub clients: usize,
    pub rows: usize,
    pub dim: usize,
    #[serde(default)]
    pub heterogeneity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LinearRegressionSpec {
    pub fn build(&self) -> Result<ProblemInstance> {
        if self.clients == 0 || self.dim == 0 || self.rows < self.dim {
            return Err(Error::InvalidConfig(format!(
                "linear regression needs clients >= 1 and rows >= dim >= 1, got {self:?}"
            )));
        }
        let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let mut shared = StreamKey::new(self.seed, Purpose::ProblemData)
            .client(usize::MAX)
            .rng();
        let center = DVector::from_fn(self.dim, |_, _| normal(&mut shared));
        let scale = 1.0 / (self.rows as f64).sqrt();
        let mut a_list = Vec::with_capacity(self.clients);
        let mut b_list = Vec::with_capacity(self.clients);
        for i in 0..self.clients {
            let mut rng = StreamKey::new(self.seed, Purpose::ProblemData).client(i).rng();
            let a = DMatrix::from_fn(self.rows, self.dim, |_, _| scale * normal(&mut rng));
            let target = &center + DVector::from_fn(self.dim, |_, _| self.heterogeneity * normal(&mut rng));
            b_list.push(&a * target);
            a_list.push(a);
        }
        build_linear_regression_ensemble(a_list, b_list)
    }
}

/// Which federation to simulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// The three-client scalar regression ensemble with slopes 1, 2, 6.
    Slope,
    ScalarQuadratic { b: Vec<f64> },
    LinearRegression(LinearRegressionSpec),
    Mlp(MlpEnsembleSpec),
}

impl ProblemSpec {
    pub fn build(&self) -> Result<ProblemInstance> {
        match self {
            Self::Slope => Ok(slope_ensemble()),
            Self::ScalarQuadratic { b } => build_quadratic_ensemble(b),
            Self::LinearRegression(spec) => spec.build(),
            Self::Mlp(spec) => build_mlp_synthetic_ensemble(spec),
        }
    }
}

/// Settings of the stationary-point table for the slope ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Settings {
    /// Local stepsize of the simulated runs.
    pub eta_l: f64,
    /// Rounds of the single-local-step simulations.
    pub rounds_single_step: usize,
    /// Rounds of the exact-local-solve simulations.
    pub rounds_local_solve: usize,
    /// Bound on `max_i |1 − η_l A_i²|^Q` defining the large-`Q` stand-in.
    pub contraction_tol: f64,
    /// Fixed-point solver tolerance.
    pub tol: f64,
    /// Starting point of solver and simulations.
    pub x0: f64,
}

impl Default for Table1Settings {
    fn default() -> Self {
        Self {
            eta_l: 0.025,
            rounds_single_step: 2000,
            rounds_local_solve: 200,
            contraction_tol: 1e-12,
            tol: 1e-10,
            x0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Simulate the configured run for each seed.
    Train,
    /// Stationary points of clipped FedAvg on the slope ensemble.
    Table1,
}

/// A declarative experiment, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_task")]
    pub task: Task,
    /// Output directory, overridable from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Replicate seeds; defaults to the single `run.seed`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "NoiseMode::is_deterministic")]
    pub noise: NoiseMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table1: Option<Table1Settings>,
}

fn default_task() -> Task {
    Task::Train
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Train => {
                if self.problem.is_none() || self.run.is_none() {
                    return Err(Error::InvalidConfig(
                        "a train task needs [problem] and [run] tables".into(),
                    ));
                }
            }
            Task::Table1 => {
                if self.problem.is_some() || self.run.is_some() {
                    return Err(Error::InvalidConfig(
                        "a table1 task takes only a [table1] table".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Problem with noise and the declared gradient bound applied.
    pub fn build_problem(&self) -> Result<ProblemInstance> {
        let spec = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("missing [problem]".into()))?;
        let mut p = spec.build().map_err(as_config_error)?;
        p = p.with_noise(self.noise).map_err(as_config_error)?;
        if let Some(g) = self.gradient_bound {
            p = p.with_gradient_bound(g).map_err(as_config_error)?;
        }
        Ok(p)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if !self.seeds.is_empty() {
            self.seeds.clone()
        } else {
            vec![self.run.as_ref().map_or(0, |r| r.seed)]
        }
    }
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidConfig(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clipping::{ClipMode, Threshold};
    use crate::engine::LocalSteps;

    const FULL: &str = r#"
seeds = [1, 2, 3]
gradient_bound = 50.0

[noise]
mode = "gaussian"
sigma_l = 0.5

[problem]
kind = "linear-regression"
clients = 6
rows = 8
dim = 3
heterogeneity = 0.5

[run]
rounds = 40
local_steps = 5
sampled_clients = 3
eta_l = 0.01
eta_g = 1.0

[run.policy]
mode = "difference"
threshold = { auto = 0.5 }

[run.privacy]
enabled = true
epsilon = 1.5
delta = 1e-5
u = 1.0
v = 2.0
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(FULL).unwrap();
        let run = cfg.run.as_ref().unwrap();
        assert_eq!(run.local_steps, LocalSteps::Finite(5));
        assert_eq!(run.policy.mode, ClipMode::Difference);
        assert_eq!(run.policy.threshold, Threshold::Auto { auto: 0.5 });
        assert_eq!(cfg.seed_list(), vec![1, 2, 3]);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn infinite_values_round_trip() {
        let text = r#"
[problem]
kind = "slope"

[run]
rounds = 3
local_steps = "inf"
sampled_clients = 3
eta_l = 0.01
eta_g = 1.0
policy = { mode = "difference", threshold = inf }
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.run.as_ref().unwrap().local_steps, LocalSteps::UntilConverged);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = FULL.replace("heterogeneity = 0.5", "heterogenity = 0.5");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::InvalidConfig(_))));
        let bad = FULL.replace("eta_g = 1.0", "eta_g = 1.0\nmomentum = 0.9");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = FULL.replace("kind = \"linear-regression\"", "kind = \"resnet\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn task_shapes_are_checked() {
        assert!(ExperimentConfig::from_toml("task = \"table1\"").is_ok());
        assert!(ExperimentConfig::from_toml("task = \"train\"").is_err());
        let mixed = format!("task = \"table1\"\n{FULL}");
        assert!(ExperimentConfig::from_toml(&mixed).is_err());
    }

    #[test]
    fn mlp_problem_parses_with_defaults() {
        let text = r#"
[problem]
kind = "mlp"
clients = 4
heterogeneity = 1.0

[run]
rounds = 2
local_steps = 2
sampled_clients = 2
eta_l = 0.1
eta_g = 1.0
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let p = cfg.build_problem().unwrap();
        assert_eq!(p.num_clients(), 4);
    }

    #[test]
    fn random_linear_regression_is_seeded() {
        let spec = LinearRegressionSpec {
            clients: 3,
            rows: 5,
            dim: 2,
            heterogeneity: 0.0,
            seed: 4,
        };
        let a = spec.build().unwrap();
        let b = spec.build().unwrap();
        assert_eq!(a.clients(), b.clients());
        // Without heterogeneity every client is solved by the same point.
        let x = a.global_optimum().unwrap();
        for f in a.clients() {
            assert!(f.gradient(x).norm() < 1e-9);
        }
    }
}
