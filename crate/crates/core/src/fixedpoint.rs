//! Closed-form one-round maps of clipped FedAvg on quadratic ensembles and
//! a solver for their fixed points.
//!
//! On quadratics a full local phase is linear in the starting point, so one
//! round collapses to a map `x ↦ x⁺` whose fixed points are exactly where
//! clipped FedAvg stalls.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::clipping::clip;
use crate::problems::{ClientObjective, ProblemInstance};
use crate::{Error, ModelVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    ModelClipLambda,
    DifferenceClipLambda,
    GradientClip,
    LocalMinClip,
}

/// One round of a clipped algorithm as a deterministic map.
pub trait OneRoundMap {
    fn kind(&self) -> MapKind;
    fn dimension(&self) -> usize;
    fn apply(&self, x: &ModelVector) -> ModelVector;
}

fn clip_scalar(v: f64, c: f64) -> f64 {
    v.clamp(-c, c)
}

/// `mean_i clip(λx + (1−λ)b_i, c)`: one round of model clipping on the
/// scalar ensemble `½(x − b_i)²` with `λ = (1 − η_l)^Q`.
pub fn model_clip_map(x: f64, b: &[f64], lambda: f64, c: f64) -> f64 {
    b.iter()
        .map(|&bi| clip_scalar(lambda * x + (1.0 - lambda) * bi, c))
        .sum::<f64>()
        / b.len() as f64
}

/// `λ = (1 − η_l)^Q`, which lies in `(0, 1)` for `η_l ∈ (0, 1)`.
pub fn model_contraction(eta_l: f64, q: usize) -> Result<f64> {
    if !(eta_l > 0.0 && eta_l < 1.0) || q == 0 {
        return Err(Error::InvalidArgument(format!(
            "model-clip map needs eta_l in (0, 1) and Q >= 1, got eta_l = {eta_l}, Q = {q}"
        )));
    }
    Ok((1.0 - eta_l).powi(q.min(i32::MAX as usize) as i32))
}

/// Closed-form fixed point `λc/(3−2λ)` of the three-client model-clip
/// example with `b = (−½, −½, 5)` scaled to threshold `c`.
pub fn model_clip_closed_form(lambda: f64, c: f64) -> f64 {
    lambda * c / (3.0 - 2.0 * lambda)
}

/// Local-phase operator `Λ = (I − (I − η_l AᵀA)^Q)(AᵀA)^{-1}`, so that `Q`
/// gradient steps on `½‖Ax − b‖²` move `x` by `−Λ ∇f(x)`. `q = None` gives
/// the limit `(AᵀA)^{-1}`. For `Q ≥ 2` the step must satisfy
/// `η_l < 2/λ_max(AᵀA)`; with `Q = 1` the operator is `η_l I` for any step.
pub fn lambda_map_matrix(gram: &DMatrix<f64>, eta_l: f64, q: Option<usize>) -> Result<DMatrix<f64>> {
    let d = gram.nrows();
    if gram.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: gram.ncols(),
        });
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > max.abs() * 1e-12 && min > 0.0) {
        return Err(Error::Singular(format!(
            "AᵀA has eigenvalue {min:e} (largest {max:e})"
        )));
    }
    if !(eta_l > 0.0) || (matches!(q, Some(q) if q > 1) && eta_l >= 2.0 / max) {
        return Err(Error::InvalidArgument(format!(
            "eta_l = {eta_l} must lie in (0, 2/λ_max) = (0, {})",
            2.0 / max
        )));
    }
    let scaled = eig.eigenvalues.map(|mu| match q {
        Some(q) => (1.0 - (1.0 - eta_l * mu).powf(q as f64)) / mu,
        None => 1.0 / mu,
    });
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&scaled) * v.transpose())
}

/// Model clipping on the scalar ensemble `½(x − b_i)²`.
#[derive(Debug, Clone)]
pub struct ModelClipMap {
    pub lambda: f64,
    pub b: Vec<f64>,
    pub c: f64,
}

impl OneRoundMap for ModelClipMap {
    fn kind(&self) -> MapKind {
        MapKind::ModelClipLambda
    }

    fn dimension(&self) -> usize {
        1
    }

    fn apply(&self, x: &ModelVector) -> ModelVector {
        ModelVector::from_element(1, model_clip_map(x[0], &self.b, self.lambda, self.c))
    }
}

/// Difference clipping on a linear-regression ensemble:
/// `x⁺ = x − mean_i clip(Λ_i ∇f_i(x), c)`.
#[derive(Debug, Clone)]
pub struct DifferenceClipMap {
    clients: Vec<ClientObjective>,
    lambdas: Vec<DMatrix<f64>>,
    pub c: f64,
}

impl DifferenceClipMap {
    pub fn new(problem: &ProblemInstance, eta_l: f64, q: Option<usize>, c: f64) -> Result<Self> {
        let lambdas = problem
            .clients()
            .iter()
            .map(|f| {
                let gram = f.gram().ok_or_else(|| {
                    Error::InvalidArgument("difference-clip map needs quadratic clients".into())
                })?;
                lambda_map_matrix(&gram, eta_l, q)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            clients: problem.clients().to_vec(),
            lambdas,
            c,
        })
    }

    pub fn operators(&self) -> &[DMatrix<f64>] {
        &self.lambdas
    }
}

impl OneRoundMap for DifferenceClipMap {
    fn kind(&self) -> MapKind {
        MapKind::DifferenceClipLambda
    }

    fn dimension(&self) -> usize {
        self.clients[0].dimension()
    }

    fn apply(&self, x: &ModelVector) -> ModelVector {
        let mut sum = ModelVector::zeros(x.len());
        for (f, lam) in self.clients.iter().zip(&self.lambdas) {
            sum += clip(&(lam * f.gradient(x)), self.c);
        }
        x - sum / self.clients.len() as f64
    }
}

/// One-step clipped gradient descent, threshold on the raw gradient:
/// `x⁺ = x − step · mean_i clip(∇f_i(x), c)`.
#[derive(Debug, Clone)]
pub struct GradientClipMap {
    clients: Vec<ClientObjective>,
    pub step: f64,
    pub c: f64,
}

impl GradientClipMap {
    pub fn new(problem: &ProblemInstance, step: f64, c: f64) -> Self {
        Self {
            clients: problem.clients().to_vec(),
            step,
            c,
        }
    }
}

impl OneRoundMap for GradientClipMap {
    fn kind(&self) -> MapKind {
        MapKind::GradientClip
    }

    fn dimension(&self) -> usize {
        self.clients[0].dimension()
    }

    fn apply(&self, x: &ModelVector) -> ModelVector {
        let mut sum = ModelVector::zeros(x.len());
        for f in &self.clients {
            sum += clip(&f.gradient(x), self.c);
        }
        x - sum * (self.step / self.clients.len() as f64)
    }
}

/// Exact local solves followed by clipping of `x_i* − x`:
/// `x⁺ = x + mean_i clip(x_i* − x, c)`.
#[derive(Debug, Clone)]
pub struct LocalMinClipMap {
    minimizers: Vec<ModelVector>,
    pub c: f64,
}

impl LocalMinClipMap {
    pub fn new(problem: &ProblemInstance, c: f64) -> Result<Self> {
        let minimizers = problem
            .clients()
            .iter()
            .map(|f| {
                f.local_minimizer()
                    .ok_or_else(|| Error::Singular("client has no unique minimizer".into()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { minimizers, c })
    }
}

impl OneRoundMap for LocalMinClipMap {
    fn kind(&self) -> MapKind {
        MapKind::LocalMinClip
    }

    fn dimension(&self) -> usize {
        self.minimizers[0].len()
    }

    fn apply(&self, x: &ModelVector) -> ModelVector {
        let mut sum = ModelVector::zeros(x.len());
        for m in &self.minimizers {
            sum += clip(&(m - x), self.c);
        }
        x + sum / self.minimizers.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Initial damping `β` in `x ← x + β (map(x) − x)`.
    pub beta: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1_000_000,
            beta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub x: ModelVector,
    /// `‖map(x) − x‖`, at most `tol`.
    pub residual: f64,
    pub iterations: usize,
}

/// Damped fixed-point iteration. `β` is halved whenever the residual grows;
/// one-dimensional maps fall back to bisection on `map(x) − x` if the
/// iteration stalls.
pub fn solve_fixed_point(map: &dyn OneRoundMap, x_init: &ModelVector, opts: SolveOptions) -> Result<FixedPoint> {
    if !(opts.tol > 0.0) || !(opts.beta > 0.0 && opts.beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need tol > 0 and beta in (0, 1], got {} and {}",
            opts.tol, opts.beta
        )));
    }
    if x_init.len() != map.dimension() {
        return Err(Error::DimensionMismatch {
            expected: map.dimension(),
            found: x_init.len(),
        });
    }
    const STALL_WINDOW: usize = 10_000;
    let mut x = x_init.clone();
    let mut beta = opts.beta;
    let mut prev = f64::INFINITY;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let step = map.apply(&x) - &x;
        residual = step.norm();
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            return Ok(FixedPoint { x, residual, iterations });
        }
        if residual > prev {
            beta = (beta * 0.5).max(1e-12);
        }
        if residual < best * (1.0 - 1e-9) {
            best = residual;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= STALL_WINDOW {
                break;
            }
        }
        prev = residual;
        x += step * beta;
        iterations += 1;
    }
    if map.dimension() == 1 {
        if let Some(fp) = bisect_scalar(map, x[0], opts.tol, iterations) {
            return Ok(fp);
        }
    }
    Err(Error::NonConvergence { iterations, residual })
}

fn bisect_scalar(map: &dyn OneRoundMap, start: f64, tol: f64, iterations: usize) -> Option<FixedPoint> {
    let r = |x: f64| map.apply(&ModelVector::from_element(1, x))[0] - x;
    let start = if start.is_finite() { start } else { 0.0 };
    let r0 = r(start);
    if r0 == 0.0 {
        return Some(FixedPoint {
            x: ModelVector::from_element(1, start),
            residual: 0.0,
            iterations,
        });
    }
    // Walk outward in the direction the residual points until it flips sign.
    let dir = r0.signum();
    let mut width = 1.0f64.max(start.abs());
    let (mut lo, mut hi);
    loop {
        let probe = start + dir * width;
        if r(probe).signum() != r0.signum() {
            (lo, hi) = if dir > 0.0 { (start, probe) } else { (probe, start) };
            break;
        }
        width *= 2.0;
        if width > 1e15 {
            return None;
        }
    }
    let r_lo = r(lo).signum();
    for k in 0..2000 {
        let mid = 0.5 * (lo + hi);
        let rm = r(mid);
        if rm.abs() <= tol || mid == lo || mid == hi {
            let residual = rm.abs();
            return (residual <= tol).then(|| FixedPoint {
                x: ModelVector::from_element(1, mid),
                residual,
                iterations: iterations + k,
            });
        }
        if rm.signum() == r_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}

/// Scalar function whose derivative is `clip(Λ f'(x), c)` for
/// `f(x) = ½(Ax − b)²`: quadratic `Λ f(x)` while `|Λ A (Ax − b)| ≤ c`,
/// and `c |x − b/A| − c²/(2ΛA²)` beyond.
pub fn huberized_loss(lambda: f64, a: f64, b: f64, c: f64, x: f64) -> Result<f64> {
    check_huber(lambda, a, c)?;
    let r = a * x - b;
    if (lambda * a * r).abs() <= c {
        Ok(lambda * 0.5 * r * r)
    } else {
        Ok(c * (x - b / a).abs() - c * c / (2.0 * lambda * a * a))
    }
}

/// Derivative of [`huberized_loss`].
pub fn huberized_derivative(lambda: f64, a: f64, b: f64, c: f64, x: f64) -> Result<f64> {
    check_huber(lambda, a, c)?;
    Ok(clip_scalar(lambda * a * (a * x - b), c))
}

fn check_huber(lambda: f64, a: f64, c: f64) -> Result<()> {
    if a == 0.0 {
        return Err(Error::InvalidArgument("Huberized loss needs A != 0".into()));
    }
    if !(lambda > 0.0 && c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Huberized loss needs Λ > 0 and c > 0, got {lambda} and {c}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_linear_regression_ensemble, build_quadratic_ensemble, slope_ensemble};
    use nalgebra::DVector;

    fn scalar(x: f64) -> ModelVector {
        ModelVector::from_element(1, x)
    }

    #[test]
    fn model_clip_map_example() {
        let b = [-0.5, -0.5, 5.0];
        assert!((model_clip_map(0.25, &b, 0.5, 1.0) - 0.25).abs() < 1e-15);
        assert_eq!(model_clip_closed_form(0.5, 1.0), 0.25);
        assert_eq!(model_clip_map(0.0, &[0.0], 0.3, 1.0), 0.0);
        let inactive = model_clip_map(0.7, &[1.0, 2.0], 0.5, 100.0);
        assert!((inactive - (0.35 + 0.75)).abs() < 1e-15);
    }

    #[test]
    fn model_clip_fixed_point_is_far_from_optimum() {
        let map = ModelClipMap {
            lambda: 0.5,
            b: vec![-0.5, -0.5, 5.0],
            c: 1.0,
        };
        let fp = solve_fixed_point(&map, &scalar(3.0), SolveOptions::default()).unwrap();
        assert!((fp.x[0] - 0.25).abs() < 1e-9);
        assert!(fp.residual <= 1e-10);
        assert!((fp.x[0] - 4.0 / 3.0).abs() > 1.0);
    }

    #[test]
    fn model_contraction_range() {
        assert_eq!(model_contraction(0.5, 1).unwrap(), 0.5);
        assert!(model_contraction(1.0, 1).is_err());
        assert!(model_contraction(0.5, 0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let l = lambda_map_matrix(&one, 0.1, Some(2)).unwrap();
        assert!((l[(0, 0)] - 0.19).abs() < 1e-15);

        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l1 = lambda_map_matrix(&gram, 0.2, Some(1)).unwrap();
        assert!((l1 - DMatrix::identity(2, 2) * 0.2).amax() < 1e-14);

        let big = lambda_map_matrix(&gram, 0.2, Some(1_000_000)).unwrap();
        let inv = gram.clone().try_inverse().unwrap();
        assert!((big - &inv).amax() < 1e-9);
        assert!((lambda_map_matrix(&gram, 0.2, None).unwrap() - inv).amax() < 1e-12);

        assert!(matches!(
            lambda_map_matrix(&DMatrix::zeros(2, 2), 0.1, Some(1)),
            Err(Error::Singular(_))
        ));
        assert!(lambda_map_matrix(&gram, 2.0, Some(2)).is_err());
        assert!(lambda_map_matrix(&gram, 2.0, Some(1)).is_ok());
    }

    #[test]
    fn difference_map_examples() {
        let p = slope_ensemble();
        let inactive = DifferenceClipMap::new(&p, 0.01, Some(3), f64::INFINITY).unwrap();
        let x = scalar(0.3);
        let mut expect = 0.0;
        for (f, l) in p.clients().iter().zip(inactive.operators()) {
            expect += (l * f.gradient(&x))[0];
        }
        assert!((inactive.apply(&x)[0] - (0.3 - expect / 3.0)).abs() < 1e-15);

        let limit = DifferenceClipMap::new(&p, 0.01, None, 1.0).unwrap();
        assert!((limit.apply(&scalar(2.0 / 3.0))[0] - 2.0 / 3.0).abs() < 1e-14);

        let single = build_quadratic_ensemble(&[0.0]).unwrap();
        let m = DifferenceClipMap::new(&single, 0.1, Some(2), 1e9).unwrap();
        assert!((m.apply(&scalar(1.0))[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn table_one_cells() {
        let p = slope_ensemble();
        let opts = SolveOptions::default();
        let cells = [
            (GradientClipMap::new(&p, 0.02, f64::INFINITY).apply(&scalar(0.0))[0], 0.0),
        ];
        assert_eq!(cells[0].0, cells[0].1);
        let g1 = solve_fixed_point(&GradientClipMap::new(&p, 0.02, 1.0), &scalar(3.0), opts).unwrap();
        assert!((g1.x[0] - 0.5).abs() < 1e-8);
        let g_inf = solve_fixed_point(&GradientClipMap::new(&p, 0.02, f64::INFINITY), &scalar(3.0), opts).unwrap();
        assert!(g_inf.x[0].abs() < 1e-8);
        let m_inf = solve_fixed_point(&LocalMinClipMap::new(&p, f64::INFINITY).unwrap(), &scalar(0.0), opts).unwrap();
        assert!((m_inf.x[0] - 13.0 / 9.0).abs() < 1e-8);
        let m1 = solve_fixed_point(&LocalMinClipMap::new(&p, 1.0).unwrap(), &scalar(0.0), opts).unwrap();
        assert!((m1.x[0] - 2.0 / 3.0).abs() < 1e-8);
    }

    #[test]
    fn non_convergence_is_reported() {
        // x ↦ x + 1 has no fixed point.
        struct Shift;
        impl OneRoundMap for Shift {
            fn kind(&self) -> MapKind {
                MapKind::GradientClip
            }
            fn dimension(&self) -> usize {
                2
            }
            fn apply(&self, x: &ModelVector) -> ModelVector {
                x.add_scalar(1.0)
            }
        }
        let opts = SolveOptions {
            max_iter: 1000,
            ..Default::default()
        };
        let err = solve_fixed_point(&Shift, &DVector::zeros(2), opts).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn bisection_rescues_oscillating_scalar_map() {
        // x ↦ −3x + 1 oscillates for β = 1; fixed point 1/4.
        struct Flip;
        impl OneRoundMap for Flip {
            fn kind(&self) -> MapKind {
                MapKind::GradientClip
            }
            fn dimension(&self) -> usize {
                1
            }
            fn apply(&self, x: &ModelVector) -> ModelVector {
                x.map(|v| -3.0 * v + 1.0)
            }
        }
        let opts = SolveOptions {
            beta: 1.0,
            max_iter: 50,
            ..Default::default()
        };
        let fp = solve_fixed_point(&Flip, &scalar(5.0), opts).unwrap();
        assert!((fp.x[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huberized_loss(1.0, 1.0, 0.0, 1.0, 0.5).unwrap(), 0.125);
        assert_eq!(huberized_derivative(1.0, 1.0, 0.0, 1.0, 2.0).unwrap(), 1.0);
        assert!(huberized_loss(1.0, 0.0, 0.0, 1.0, 0.5).is_err());
        // Continuous across the boundary |x − b/A| = c/(ΛA²).
        let (l, a, b, c) = (0.3, -2.0, 1.0, 0.4);
        let edge = b / a + c / (l * a * a);
        let below = huberized_loss(l, a, b, c, edge - 1e-9).unwrap();
        let above = huberized_loss(l, a, b, c, edge + 1e-9).unwrap();
        assert!((below - above).abs() < 1e-8);
    }

    #[test]
    fn recipe_fixed_point_is_optimum() {
        let p = build_linear_regression_ensemble(
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.3, 0.8]),
            ],
            vec![DVector::from_vec(vec![1.0, -1.0]), DVector::from_vec(vec![0.0, 2.0])],
        )
        .unwrap();
        let xs = p.global_optimum().unwrap().clone();
        let gmax = p.clients().iter().map(|f| f.gradient(&xs).norm()).fold(0.0, f64::max);
        let map = DifferenceClipMap::new(&p, 1.0 / gmax, Some(1), 1.0).unwrap();
        let fp = solve_fixed_point(&map, &DVector::zeros(2), SolveOptions::default()).unwrap();
        assert!((fp.x - xs).norm() <= 1e-8);
    }
}
