//! Gaussian-mechanism noise calibration and per-client perturbation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, ModelVector, Result};

/// Attached to every calibration result.
pub const CALIBRATION_DISCLAIMER: &str =
    "calibration constants are user-supplied; no formal accounting is performed";

/// Client-level `(ε, δ)` target with the calibration constants `u` (validity
/// regime) and `v` (variance multiplier).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub delta: f64,
    pub u: f64,
    pub v: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: 1.0,
            delta: 1e-5,
            u: 1.0,
            v: 2.0,
        }
    }
}

impl PrivacyConfig {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            enabled: true,
            epsilon,
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.u > 0.0 && self.v > 0.0) {
            return Err(Error::InvalidArgument(
                "calibration constants u and v must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-client, per-round Gaussian noise `z ~ N(0, σ² I_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-coordinate variance.
    pub sigma2: f64,
    pub dimension: usize,
}

impl NoiseSpec {
    pub fn new(sigma2: f64, dimension: usize) -> Result<Self> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise variance {sigma2}")));
        }
        Ok(Self { sigma2, dimension })
    }

    pub fn zero(dimension: usize) -> Self {
        Self {
            sigma2: 0.0,
            dimension,
        }
    }
}

/// Output of [`calibrate_noise`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCalibration {
    pub spec: NoiseSpec,
    /// Sampling ratio `q = P / N`.
    pub sampling_rate: f64,
    /// Whether `ε ≤ u q² T` holds.
    pub in_regime: bool,
    pub disclaimer: String,
}

/// `σ² = v c² P T ln(1/δ) / (N² ε²)`, plus the regime check `ε ≤ u (P/N)² T`.
pub fn calibrate_noise(
    cfg: &PrivacyConfig,
    c: f64,
    sampled: usize,
    clients: usize,
    rounds: usize,
    dimension: usize,
) -> Result<NoiseCalibration> {
    cfg.validate()?;
    if sampled == 0 || clients == 0 || rounds == 0 {
        return Err(Error::InvalidArgument(
            "P, N and T must be positive for calibration".into(),
        ));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "calibration needs a finite clipping threshold, got {c}"
        )));
    }
    let (p, n, t) = (sampled as f64, clients as f64, rounds as f64);
    let sigma2 = cfg.v * c * c * p * t * (1.0 / cfg.delta).ln() / (n * n * cfg.epsilon * cfg.epsilon);
    let q = p / n;
    Ok(NoiseCalibration {
        spec: NoiseSpec::new(sigma2, dimension)?,
        sampling_rate: q,
        in_regime: cfg.epsilon <= cfg.u * q * q * t,
        disclaimer: CALIBRATION_DISCLAIMER.to_string(),
    })
}

/// One draw of i.i.d. `N(0, σ²)` coordinates.
pub fn draw_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> ModelVector {
    if spec.sigma2 == 0.0 {
        return ModelVector::zeros(spec.dimension);
    }
    let std = spec.sigma2.sqrt();
    ModelVector::from_fn(spec.dimension, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Privacy-noise term of the convergence bound, `2 η_g L d σ² / (η_l P Q)`.
pub fn noise_term_in_bound(
    spec: &NoiseSpec,
    eta_g: f64,
    eta_l: f64,
    sampled: usize,
    local_steps: usize,
    lipschitz: f64,
) -> f64 {
    2.0 * eta_g * lipschitz * spec.dimension as f64 * spec.sigma2
        / (eta_l * sampled as f64 * local_steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn cfg(eps: f64, delta: f64) -> PrivacyConfig {
        PrivacyConfig::new(eps, delta)
    }

    #[test]
    fn experiment_setting_value() {
        let cal = calibrate_noise(&cfg(1.5, 1e-5), 1.0, 80, 1920, 100, 10).unwrap();
        // 2 * 80 * 100 * ln(1e5) / (1920^2 * 1.5^2)
        let expected = 16000.0 * 100000f64.ln() / (3_686_400.0 * 2.25);
        assert!((cal.spec.sigma2 - expected).abs() <= 1e-12 * expected);
        assert!((cal.spec.sigma2 - 0.02220).abs() < 1e-5);
        assert!(!cal.in_regime);
        assert_eq!(cal.disclaimer, CALIBRATION_DISCLAIMER);
    }

    #[test]
    fn doubling_epsilon_quarters_variance() {
        let a = calibrate_noise(&cfg(1.0, 1e-5), 1.0, 10, 100, 50, 1).unwrap();
        let b = calibrate_noise(&cfg(2.0, 1e-5), 1.0, 10, 100, 50, 1).unwrap();
        assert!((a.spec.sigma2 / b.spec.sigma2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_threshold_gives_zero_variance() {
        let cal = calibrate_noise(&cfg(1.0, 1e-5), 0.0, 10, 100, 50, 3).unwrap();
        assert_eq!(cal.spec.sigma2, 0.0);
    }

    #[test]
    fn regime_flag() {
        // q = 0.5, q^2 T = 25
        let inside = calibrate_noise(&cfg(20.0, 1e-5), 1.0, 50, 100, 100, 1).unwrap();
        assert!(inside.in_regime);
        let outside = calibrate_noise(&cfg(30.0, 1e-5), 1.0, 50, 100, 100, 1).unwrap();
        assert!(!outside.in_regime);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(calibrate_noise(&cfg(1.0, 0.0), 1.0, 1, 1, 1, 1).is_err());
        assert!(calibrate_noise(&cfg(1.0, 1.0), 1.0, 1, 1, 1, 1).is_err());
        assert!(calibrate_noise(&cfg(0.0, 0.5), 1.0, 1, 1, 1, 1).is_err());
        assert!(calibrate_noise(&cfg(-1.0, 0.5), 1.0, 1, 1, 1, 1).is_err());
        assert!(calibrate_noise(&cfg(1.0, 0.5), f64::INFINITY, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn zero_variance_draw_is_zero() {
        let mut rng = StreamKey::new(1, Purpose::PrivacyNoise).rng();
        assert_eq!(draw_noise(&NoiseSpec::zero(3), &mut rng), ModelVector::zeros(3));
    }

    #[test]
    fn noise_term_examples() {
        assert_eq!(noise_term_in_bound(&NoiseSpec::zero(5), 1.0, 1.0, 1, 1, 1.0), 0.0);
        let unit = NoiseSpec::new(1.0, 1).unwrap();
        assert_eq!(noise_term_in_bound(&unit, 1.0, 1.0, 1, 1, 1.0), 2.0);
        let a = noise_term_in_bound(&NoiseSpec::new(0.3, 4).unwrap(), 0.7, 0.1, 3, 5, 2.0);
        let b = noise_term_in_bound(&NoiseSpec::new(0.3, 8).unwrap(), 0.7, 0.1, 3, 5, 2.0);
        assert!((b / a - 2.0).abs() < 1e-14);
    }
}
