//! Client objective ensembles, their gradient oracles and analytic constants.

mod mlp;
mod objective;
mod oracle;

pub use mlp::{allocate_counts, parameter_count, MlpObjective};
pub use objective::{ClientObjective, ObjectiveKind};
pub use oracle::{GradientOracle, NoiseMode};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{Purpose, StreamKey};
use crate::{Error, ModelVector, Result};

/// How a problem constant was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum Estimate {
    ClosedForm,
    /// Exact maximum of a convex quantity over the vertices of a box.
    VertexEnumeration { radius: f64 },
    /// Maximum over randomly drawn probe points; a lower estimate of the supremum.
    Sampled { points: usize },
    Declared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: f64,
    #[serde(flatten)]
    pub method: Estimate,
}

impl Constant {
    fn new(value: f64, method: Estimate) -> Self {
        Self { value, method }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Gradient Lipschitz constant `L`.
    pub lipschitz: Constant,
    /// Stochastic-gradient norm bound `G`.
    pub gradient_bound: Option<Constant>,
    /// Intra-client gradient noise `σ_l`.
    pub sigma_l: Constant,
    /// Inter-client gradient divergence bound `σ_g`.
    pub sigma_g: Constant,
}

/// Region over which region-dependent constants (σ_g, G, minibatch σ_l) are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRegion {
    pub center: ModelVector,
    pub radius: f64,
}

/// Synthetic MLP federation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpEnsembleSpec {
    pub hidden_width: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    /// 0 gives every client the same label mix; 1 gives each client a single class.
    pub heterogeneity: f64,
    pub seed: u64,
    pub classes: usize,
    pub input_dim: usize,
    /// Scale of the class-mean vectors.
    pub separation: f64,
    /// Per-coordinate std of features around their class mean.
    pub feature_noise: f64,
}

impl Default for MlpEnsembleSpec {
    fn default() -> Self {
        Self {
            hidden_width: 8,
            clients: 10,
            samples_per_client: 100,
            heterogeneity: 0.0,
            seed: 0,
            classes: 4,
            input_dim: 4,
            separation: 2.0,
            feature_noise: 1.0,
        }
    }
}

/// A federation of `N` client objectives with the constants the analysis needs.
///
/// The global objective is the client average `f = (1/N) Σ f_i`; it has the
/// same minimizers as the sum.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    clients: Vec<ClientObjective>,
    noise: NoiseMode,
    constants: ProblemConstants,
    declared_gradient_bound: Option<f64>,
    region: ProbeRegion,
    f_star: Option<f64>,
    global_optimum: Option<ModelVector>,
    dimension: usize,
}

impl ProblemInstance {
    fn from_clients(clients: Vec<ClientObjective>) -> Result<Self> {
        let first = clients.first().ok_or(Error::Empty("client list"))?;
        let dimension = first.dimension();
        if dimension == 0 {
            return Err(Error::InvalidArgument("dimension must be at least 1".into()));
        }
        for c in &clients {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: c.dimension(),
                });
            }
        }
        let global_optimum = quadratic_optimum(&clients);
        let center = global_optimum
            .clone()
            .unwrap_or_else(|| DVector::zeros(dimension));
        let radius = 1.0 + 2.0 * center.amax();
        let mut p = Self {
            clients,
            noise: NoiseMode::Deterministic,
            constants: ProblemConstants {
                lipschitz: Constant::new(0.0, Estimate::ClosedForm),
                gradient_bound: None,
                sigma_l: Constant::new(0.0, Estimate::ClosedForm),
                sigma_g: Constant::new(0.0, Estimate::ClosedForm),
            },
            declared_gradient_bound: None,
            region: ProbeRegion { center, radius },
            f_star: None,
            global_optimum,
            dimension,
        };
        p.f_star = p.global_optimum.as_ref().map(|x| p.loss(x));
        p.refresh_constants()?;
        Ok(p)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn clients(&self) -> &[ClientObjective] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientObjective {
        &self.clients[i]
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    pub fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    pub fn region(&self) -> &ProbeRegion {
        &self.region
    }

    pub fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    pub fn global_optimum(&self) -> Option<&ModelVector> {
        self.global_optimum.as_ref()
    }

    pub fn is_quadratic(&self) -> bool {
        self.clients.iter().all(|c| c.gram().is_some())
    }

    /// `f(x) = (1/N) Σ f_i(x)`.
    pub fn loss(&self, x: &ModelVector) -> f64 {
        self.clients.iter().map(|c| c.loss(x)).sum::<f64>() / self.num_clients() as f64
    }

    /// `∇f(x) = (1/N) Σ ∇f_i(x)`.
    pub fn gradient(&self, x: &ModelVector) -> ModelVector {
        self.total_gradient(x) / self.num_clients() as f64
    }

    /// `Σ ∇f_i(x)`.
    pub fn total_gradient(&self, x: &ModelVector) -> ModelVector {
        self.clients
            .iter()
            .fold(DVector::zeros(self.dimension), |acc, c| acc + c.gradient(x))
    }

    pub fn oracle(&self, client: usize, rng: ChaCha8Rng) -> GradientOracle<'_> {
        GradientOracle::new(
            &self.clients[client],
            self.noise,
            rng,
            self.constants.gradient_bound.map(|g| g.value),
        )
    }

    /// Default starting point: the origin for quadratics, a seeded small
    /// random initialization for the MLP.
    pub fn initial_point(&self, seed: u64) -> ModelVector {
        match &self.clients[0] {
            ClientObjective::Mlp(m) => {
                m.initial_point(&mut StreamKey::new(seed, Purpose::Initialization).rng())
            }
            _ => DVector::zeros(self.dimension),
        }
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Result<Self> {
        match noise {
            NoiseMode::Gaussian { sigma_l } if !(sigma_l >= 0.0 && sigma_l.is_finite()) => {
                return Err(Error::InvalidArgument(format!("sigma_l = {sigma_l}")));
            }
            NoiseMode::Minibatch { batch_size: 0 } => {
                return Err(Error::InvalidArgument("batch_size must be positive".into()));
            }
            _ => {}
        }
        self.noise = noise;
        self.refresh_constants()?;
        Ok(self)
    }

    /// Declares `G`; oracles flag any sampled gradient whose norm exceeds it.
    pub fn with_gradient_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::InvalidArgument(format!("gradient bound {bound}")));
        }
        self.declared_gradient_bound = Some(bound);
        self.refresh_constants()?;
        Ok(self)
    }

    pub fn with_probe_region(mut self, center: ModelVector, radius: f64) -> Result<Self> {
        if center.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: center.len(),
            });
        }
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("probe radius {radius}")));
        }
        self.region = ProbeRegion { center, radius };
        self.refresh_constants()?;
        Ok(self)
    }

    fn probe_points(&self) -> (Vec<ModelVector>, Estimate) {
        let ProbeRegion { center, radius } = &self.region;
        let d = self.dimension;
        if self.is_quadratic() && d <= 12 {
            let mut pts = vec![center.clone()];
            for mask in 0u32..(1 << d) {
                let v = DVector::from_fn(d, |j, _| {
                    if mask >> j & 1 == 1 {
                        center[j] + radius
                    } else {
                        center[j] - radius
                    }
                });
                pts.push(v);
            }
            (pts, Estimate::VertexEnumeration { radius: *radius })
        } else {
            let count = 32;
            let mut rng = StreamKey::new(0, Purpose::Probe).rng();
            let mut pts = vec![center.clone()];
            for _ in 0..count {
                let dir = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let r: f64 = radius * rng.random::<f64>().powf(1.0 / d as f64);
                pts.push(center + dir.normalize() * r);
            }
            (pts, Estimate::Sampled { points: count + 1 })
        }
    }

    fn refresh_constants(&mut self) -> Result<()> {
        let (probes, probe_method) = self.probe_points();

        let lipschitz = if self.is_quadratic() {
            let l = self
                .clients
                .iter()
                .map(|c| max_eigenvalue(&c.gram().unwrap()))
                .fold(0.0, f64::max);
            Constant::new(l, Estimate::ClosedForm)
        } else {
            let mut best = 0.0f64;
            for c in &self.clients {
                for w in probes.windows(2) {
                    let num = (c.gradient(&w[0]) - c.gradient(&w[1])).norm();
                    let den = (&w[0] - &w[1]).norm();
                    if den > 0.0 {
                        best = best.max(num / den);
                    }
                }
            }
            Constant::new(best, probe_method)
        };
        if !(lipschitz.value > 0.0) {
            return Err(Error::InvalidArgument(
                "gradient Lipschitz constant must be positive".into(),
            ));
        }

        let all_scalar = self
            .clients
            .iter()
            .all(|c| matches!(c, ClientObjective::ScalarQuadratic { .. }));
        let sigma_g = if all_scalar {
            // ∇f_i − ∇f = mean(b) − b_i is constant in x.
            let bs: Vec<f64> = self
                .clients
                .iter()
                .map(|c| match c {
                    ClientObjective::ScalarQuadratic { b } => *b,
                    _ => unreachable!(),
                })
                .collect();
            let mean = bs.iter().sum::<f64>() / bs.len() as f64;
            let v = bs.iter().map(|b| (b - mean).abs()).fold(0.0, f64::max);
            Constant::new(v, Estimate::ClosedForm)
        } else {
            let mut best = 0.0f64;
            for x in &probes {
                let g = self.gradient(x);
                for c in &self.clients {
                    best = best.max((c.gradient(x) - &g).norm());
                }
            }
            Constant::new(best, probe_method)
        };

        let sigma_l = match self.noise {
            NoiseMode::Deterministic => Constant::new(0.0, Estimate::ClosedForm),
            NoiseMode::Gaussian { sigma_l } => Constant::new(sigma_l, Estimate::ClosedForm),
            NoiseMode::Minibatch { batch_size } => {
                if all_scalar {
                    Constant::new(0.0, Estimate::ClosedForm)
                } else {
                    // With-replacement batches: E‖ĝ − ∇f_i‖² = (1/B)(1/n) Σ_s ‖c_s − ∇f_i‖².
                    let mut best = 0.0f64;
                    for x in &probes {
                        for c in &self.clients {
                            let g = c.gradient(x);
                            let n = c.num_components();
                            let v = (0..n)
                                .map(|s| (c.component_gradient(x, s) - &g).norm_squared())
                                .sum::<f64>()
                                / (n * batch_size) as f64;
                            best = best.max(v);
                        }
                    }
                    Constant::new(best.sqrt(), probe_method)
                }
            }
        };

        let gradient_bound = match self.declared_gradient_bound {
            Some(g) => Some(Constant::new(g, Estimate::Declared)),
            None => {
                let mut best = 0.0f64;
                for x in &probes {
                    for c in &self.clients {
                        let v = match self.noise {
                            NoiseMode::Minibatch { .. } => (0..c.num_components())
                                .map(|s| c.component_gradient(x, s).norm())
                                .fold(0.0, f64::max),
                            _ => c.gradient(x).norm(),
                        };
                        best = best.max(v);
                    }
                }
                Some(Constant::new(best, probe_method))
            }
        };

        self.constants = ProblemConstants {
            lipschitz,
            gradient_bound,
            sigma_l,
            sigma_g,
        };
        Ok(())
    }
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.max()
}

fn quadratic_optimum(clients: &[ClientObjective]) -> Option<ModelVector> {
    let d = clients[0].dimension();
    let mut h = DMatrix::zeros(d, d);
    let mut r = DVector::zeros(d);
    for c in clients {
        match c {
            ClientObjective::ScalarQuadratic { b } => {
                h[(0, 0)] += 1.0;
                r[0] += b;
            }
            ClientObjective::LinearRegression { a, b } => {
                h += a.tr_mul(a);
                r += a.tr_mul(b);
            }
            ClientObjective::Mlp(_) => return None,
        }
    }
    h.cholesky().map(|c| c.solve(&r))
}

/// Scalar quadratics `½ (x − b_i)²`, one per entry of `b_values`.
pub fn build_quadratic_ensemble(b_values: &[f64]) -> Result<ProblemInstance> {
    if b_values.is_empty() {
        return Err(Error::Empty("b_values"));
    }
    ProblemInstance::from_clients(
        b_values
            .iter()
            .map(|&b| ClientObjective::ScalarQuadratic { b })
            .collect(),
    )
}

/// Least-squares clients `½ ‖A_i x − b_i‖²`.
pub fn build_linear_regression_ensemble(
    a_list: Vec<DMatrix<f64>>,
    b_list: Vec<DVector<f64>>,
) -> Result<ProblemInstance> {
    if a_list.len() != b_list.len() {
        return Err(Error::DimensionMismatch {
            expected: a_list.len(),
            found: b_list.len(),
        });
    }
    let mut clients = Vec::with_capacity(a_list.len());
    for (a, b) in a_list.into_iter().zip(b_list) {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                found: b.len(),
            });
        }
        clients.push(ClientObjective::LinearRegression { a, b });
    }
    ProblemInstance::from_clients(clients)
}

/// Three scalar regression clients `½(x−4)²`, `½(2x−1)²`, `½(6x+1)²`.
/// Their sum has gradient `41x` and optimum 0; the client minimizers are
/// 4, 1/2 and −1/6.
pub fn slope_ensemble() -> ProblemInstance {
    let a = [1.0, 2.0, 6.0];
    let b = [4.0, 1.0, -1.0];
    build_linear_regression_ensemble(
        a.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        b.iter().map(|&v| DVector::from_element(1, v)).collect(),
    )
    .expect("static ensemble is well formed")
}

/// Synthetic one-hidden-layer classifier federation.
///
/// Client `i` draws labels from `(1 − h)·uniform + h·δ_{i mod K}`, with
/// per-class counts fixed by largest remainders, and features from a
/// Gaussian around the class mean.
pub fn build_mlp_synthetic_ensemble(spec: &MlpEnsembleSpec) -> Result<ProblemInstance> {
    if spec.hidden_width == 0 || spec.clients == 0 || spec.samples_per_client == 0 {
        return Err(Error::InvalidArgument(
            "hidden_width, clients and samples_per_client must be positive".into(),
        ));
    }
    if spec.classes < 2 || spec.input_dim == 0 {
        return Err(Error::InvalidArgument(
            "need at least 2 classes and a positive input dimension".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.heterogeneity) {
        return Err(Error::InvalidArgument(format!(
            "heterogeneity {} outside [0, 1]",
            spec.heterogeneity
        )));
    }
    let k = spec.classes;
    let p = spec.input_dim;
    let mut mean_rng = StreamKey::new(spec.seed, Purpose::ProblemData)
        .client(usize::MAX)
        .rng();
    let means: Vec<DVector<f64>> = (0..k)
        .map(|_| {
            DVector::from_fn(p, |_, _| {
                let z: f64 = StandardNormal.sample(&mut mean_rng);
                spec.separation * z
            })
        })
        .collect();

    let mut clients = Vec::with_capacity(spec.clients);
    for i in 0..spec.clients {
        let dominant = i % k;
        let weights: Vec<f64> = (0..k)
            .map(|c| {
                (1.0 - spec.heterogeneity) / k as f64
                    + if c == dominant { spec.heterogeneity } else { 0.0 }
            })
            .collect();
        let counts = allocate_counts(spec.samples_per_client, &weights);
        let mut rng = StreamKey::new(spec.seed, Purpose::ProblemData).client(i).rng();
        let n = spec.samples_per_client;
        let mut features = DMatrix::zeros(n, p);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (class, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                for j in 0..p {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[(row, j)] = means[class][j] + spec.feature_noise * z;
                }
                labels.push(class);
                row += 1;
            }
        }
        clients.push(ClientObjective::Mlp(MlpObjective {
            input_dim: p,
            hidden: spec.hidden_width,
            classes: k,
            features,
            labels,
        }));
    }
    let mut problem = ProblemInstance::from_clients(clients)?;
    let init = problem.initial_point(spec.seed);
    problem = problem.with_probe_region(init, 1.0)?;
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn quadratic_optimum_is_mean_of_offsets() {
        let p = build_quadratic_ensemble(&[-0.5, -0.5, 5.0]).unwrap();
        assert_close(p.global_optimum().unwrap()[0], 4.0 / 3.0, 1e-15);
        let single = build_quadratic_ensemble(&[0.0]).unwrap();
        assert_eq!(single.global_optimum().unwrap()[0], 0.0);
        assert_eq!(single.f_star(), Some(0.0));
        assert!(build_quadratic_ensemble(&[]).is_err());
    }

    #[test]
    fn slope_ensemble_gradient_is_41x() {
        let p = slope_ensemble();
        for &x in &[-3.0, -0.25, 0.0, 0.5, 2.0] {
            let g = p.total_gradient(&DVector::from_element(1, x));
            assert_close(g[0], 41.0 * x, 1e-12);
        }
        assert_close(p.global_optimum().unwrap()[0], 0.0, 1e-15);
        let mins: Vec<f64> = p
            .clients()
            .iter()
            .map(|c| c.local_minimizer().unwrap()[0])
            .collect();
        assert_close(mins[0], 4.0, 1e-15);
        assert_close(mins[1], 0.5, 1e-15);
        assert_close(mins[2], -1.0 / 6.0, 1e-15);
        assert_eq!(p.constants().lipschitz.value, 36.0);
    }

    #[test]
    fn regression_gradient_examples() {
        let one = build_linear_regression_ensemble(
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![DVector::from_element(1, 0.0)],
        )
        .unwrap();
        assert_eq!(one.gradient(&DVector::from_element(1, 1.0))[0], 1.0);
        let two = build_linear_regression_ensemble(
            vec![DMatrix::from_element(1, 1, 2.0)],
            vec![DVector::from_element(1, 2.0)],
        )
        .unwrap();
        assert_eq!(two.gradient(&DVector::from_element(1, 0.0))[0], -4.0);
    }

    #[test]
    fn mismatched_columns_rejected() {
        let err = build_linear_regression_ensemble(
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 3)],
            vec![DVector::zeros(2), DVector::zeros(2)],
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    fn random_regression(seed: u64, n: usize, d: usize) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (0..n)
            .map(|_| DMatrix::from_fn(d + 2, d, |_, _| rng.random_range(-1.5..1.5)))
            .collect();
        let b = (0..n)
            .map(|_| DVector::from_fn(d + 2, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        build_linear_regression_ensemble(a, b).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let p = random_regression(9, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..20 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            for c in p.clients() {
                let g = c.gradient(&x);
                let fd = DVector::from_fn(3, |j, _| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    (c.loss(&xp) - c.loss(&xm)) / (2.0 * h)
                });
                assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0));
            }
        }
    }

    #[test]
    fn reported_lipschitz_holds_on_random_pairs() {
        let p = random_regression(17, 5, 3);
        let l = p.constants().lipschitz.value;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let y = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            for c in p.clients() {
                let lhs = (c.gradient(&x) - c.gradient(&y)).norm();
                assert!(lhs <= l * (&x - &y).norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn sigma_g_bounds_divergence_over_region() {
        let p = random_regression(23, 3, 2);
        let region = p.region().clone();
        let sg = p.constants().sigma_g.value;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let x = DVector::from_fn(2, |j, _| {
                region.center[j] + rng.random_range(-region.radius..region.radius)
            });
            let g = p.gradient(&x);
            for c in p.clients() {
                assert!((c.gradient(&x) - &g).norm() <= sg * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn scalar_sigma_g_is_closed_form() {
        let p = build_quadratic_ensemble(&[-0.5, -0.5, 5.0]).unwrap();
        assert_eq!(p.constants().sigma_g.method, Estimate::ClosedForm);
        assert_close(p.constants().sigma_g.value, 5.0 - 4.0 / 3.0, 1e-12);
    }

    #[test]
    fn minibatch_sigma_l_bounds_empirical_variance() {
        let p = random_regression(31, 2, 2)
            .with_noise(NoiseMode::Minibatch { batch_size: 2 })
            .unwrap();
        let sl = p.constants().sigma_l.value;
        assert!(sl > 0.0);
        let x = p.region().center.clone();
        let mut o = p.oracle(0, StreamKey::new(1, Purpose::LocalGradient).rng());
        let g = p.client(0).gradient(&x);
        let n = 20_000;
        let m2 = (0..n)
            .map(|_| (o.sample_gradient(&x) - &g).norm_squared())
            .sum::<f64>()
            / n as f64;
        assert!(m2 <= sl * sl * 1.05);
    }

    #[test]
    fn minibatch_oracle_is_unbiased() {
        let p = random_regression(37, 1, 2)
            .with_noise(NoiseMode::Minibatch { batch_size: 1 })
            .unwrap();
        let x = DVector::from_vec(vec![0.4, -1.1]);
        let exact = p.client(0).gradient(&x);
        let mut o = p.oracle(0, StreamKey::new(2, Purpose::LocalGradient).rng());
        let n = 10_000;
        let draws: Vec<ModelVector> = (0..n).map(|_| o.sample_gradient(&x)).collect();
        for j in 0..2 {
            let mean = draws.iter().map(|g| g[j]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - exact[j]).abs() <= 4.0 * se, "coord {j}");
        }
    }

    #[test]
    fn mlp_fully_skewed_clients_are_single_class() {
        let spec = MlpEnsembleSpec {
            clients: 2,
            classes: 2,
            heterogeneity: 1.0,
            samples_per_client: 30,
            ..Default::default()
        };
        let p = build_mlp_synthetic_ensemble(&spec).unwrap();
        for (i, c) in p.clients().iter().enumerate() {
            let ClientObjective::Mlp(m) = c else { panic!() };
            assert!(m.labels.iter().all(|&y| y == i));
        }
    }

    #[test]
    fn mlp_iid_clients_agree_with_pooled_gradient() {
        let spec = MlpEnsembleSpec {
            clients: 3,
            samples_per_client: 2000,
            heterogeneity: 0.0,
            seed: 5,
            ..Default::default()
        };
        let p = build_mlp_synthetic_ensemble(&spec).unwrap();
        let x = p.initial_point(5);
        let pooled = p.gradient(&x);
        for c in p.clients() {
            let ClientObjective::Mlp(m) = c else { panic!() };
            let g = m.gradient(&x);
            // Trace of the per-sample gradient covariance bounds the expected
            // squared deviation of a client mean from the population mean.
            let n = m.num_samples();
            let trace = (0..n)
                .map(|s| (m.sample_gradient(&x, s) - &g).norm_squared())
                .sum::<f64>()
                / (n - 1) as f64;
            assert!((g - &pooled).norm_squared() <= 4.0 * trace / n as f64);
        }
    }

    #[test]
    fn mlp_skewed_clients_disagree() {
        let spec = MlpEnsembleSpec {
            clients: 3,
            samples_per_client: 2000,
            heterogeneity: 1.0,
            seed: 5,
            ..Default::default()
        };
        let p = build_mlp_synthetic_ensemble(&spec).unwrap();
        let x = p.initial_point(5);
        let pooled = p.gradient(&x);
        let ClientObjective::Mlp(m) = p.client(0) else { panic!() };
        let g = m.gradient(&x);
        let n = m.num_samples();
        let trace = (0..n)
            .map(|s| (m.sample_gradient(&x, s) - &g).norm_squared())
            .sum::<f64>()
            / (n - 1) as f64;
        assert!((g - &pooled).norm_squared() > 4.0 * trace / n as f64);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences_at_random_points() {
        let spec = MlpEnsembleSpec {
            clients: 2,
            samples_per_client: 20,
            seed: 8,
            ..Default::default()
        };
        let p = build_mlp_synthetic_ensemble(&spec).unwrap();
        let mut rng = StreamKey::new(99, Purpose::Probe).rng();
        let h = 1e-5;
        for k in 0..10 {
            let x = p.initial_point(k)
                + DVector::from_fn(p.dimension(), |_, _| rng.random_range(-0.5..0.5));
            let c = p.client(k as usize % 2);
            let g = c.gradient(&x);
            let fd = DVector::from_fn(p.dimension(), |j, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                (c.loss(&xp) - c.loss(&xm)) / (2.0 * h)
            });
            let rel = (&g - &fd).amax() / g.amax();
            assert!(rel <= 1e-5, "max rel error {rel}");
        }
    }
}
