//! The clip operator, model/difference clipping policies, and clipping factors.

use serde::{Deserialize, Serialize};

use crate::{Error, ModelVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipMode {
    #[default]
    None,
    /// Clip the transmitted local model `x_i^{t,Q}`.
    Model,
    /// Clip the update difference `x_i^{t,Q} − x^t`.
    Difference,
}

/// Clipping threshold: a fixed value (possibly `inf`) or a fraction of the
/// mean update magnitude recorded in an unclipped run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Fixed(f64),
    Auto { auto: f64 },
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(f64::INFINITY)
    }
}

/// What the threshold is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdUnits {
    /// The transmitted quantity itself.
    #[default]
    Update,
    /// The update divided by the local stepsize, i.e. the summed local
    /// gradients. Equivalent to a threshold of `η_l · c` on the update.
    Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClippingPolicy {
    pub mode: ClipMode,
    pub threshold: Threshold,
    pub units: ThresholdUnits,
}

/// Result of applying a policy on one client.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub transmitted: ModelVector,
    /// Realized clipping factor `c / max(c, ‖·‖)`.
    pub factor: f64,
    /// Norm of the quantity the policy clips, before clipping.
    pub preclip_norm: f64,
}

impl ClippingPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn difference(c: f64) -> Self {
        Self {
            mode: ClipMode::Difference,
            threshold: Threshold::Fixed(c),
            units: ThresholdUnits::Update,
        }
    }

    pub fn model(c: f64) -> Self {
        Self {
            mode: ClipMode::Model,
            threshold: Threshold::Fixed(c),
            units: ThresholdUnits::Update,
        }
    }

    pub fn auto(mode: ClipMode, rho: f64) -> Self {
        Self {
            mode,
            threshold: Threshold::Auto { auto: rho },
            units: ThresholdUnits::Update,
        }
    }

    pub fn with_units(mut self, units: ThresholdUnits) -> Self {
        self.units = units;
        self
    }

    pub fn is_auto(&self) -> bool {
        self.mode != ClipMode::None && matches!(self.threshold, Threshold::Auto { .. })
    }

    /// Threshold value; `inf` when the mode is `None`.
    pub fn resolved_threshold(&self) -> Result<f64> {
        if self.mode == ClipMode::None {
            return Ok(f64::INFINITY);
        }
        match self.threshold {
            Threshold::Fixed(c) if c > 0.0 => Ok(c),
            Threshold::Fixed(c) => Err(Error::InvalidArgument(format!(
                "clipping threshold must be positive, got {c}"
            ))),
            Threshold::Auto { .. } => Err(Error::UnresolvedThreshold),
        }
    }

    /// Same policy with the threshold expressed on the transmitted update.
    pub fn in_update_units(&self, eta_l: f64) -> Result<Self> {
        let c = self.resolved_threshold()?;
        let c = match self.units {
            ThresholdUnits::Update => c,
            ThresholdUnits::Direction => c * eta_l,
        };
        Ok(Self {
            mode: self.mode,
            threshold: Threshold::Fixed(c),
            units: ThresholdUnits::Update,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            Threshold::Fixed(c) if !(c > 0.0) => Err(Error::InvalidConfig(format!(
                "clipping threshold must be positive, got {c}"
            ))),
            Threshold::Auto { auto } if !(auto > 0.0 && auto.is_finite()) => Err(
                Error::InvalidConfig(format!("auto threshold fraction must be positive, got {auto}")),
            ),
            _ => Ok(()),
        }
    }
}

/// `c / max(c, norm)`, with the tie `norm == c` giving exactly 1.
pub fn factor_from_norm(norm: f64, c: f64) -> f64 {
    if norm <= c {
        1.0
    } else {
        c / norm
    }
}

/// `c / max(c, ‖v‖)`, in (0, 1]. A zero vector has factor 1.
pub fn clip_factor(v: &ModelVector, c: f64) -> f64 {
    factor_from_norm(v.norm(), c)
}

/// `v · min{1, c/‖v‖}`.
///
/// Vectors inside the ball are returned unchanged bit for bit. Scaled
/// outputs are nudged inward by at most a few ulps so that their computed
/// norm never exceeds `c`, which makes the operator exactly idempotent.
pub fn clip(v: &ModelVector, c: f64) -> ModelVector {
    let norm = v.norm();
    if norm <= c {
        return v.clone();
    }
    let mut out = v * (c / norm);
    while out.norm() > c {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

/// Applies a resolved policy to one client's local result.
///
/// `Model` clips `x_local_final`; the server forms the difference later.
/// `Difference` clips `x_local_final − x_round_start`. `None` returns the raw
/// difference with factor 1.
pub fn apply_policy(
    policy: &ClippingPolicy,
    x_local_final: &ModelVector,
    x_round_start: &ModelVector,
) -> Result<PolicyOutput> {
    if x_local_final.len() != x_round_start.len() {
        return Err(Error::DimensionMismatch {
            expected: x_round_start.len(),
            found: x_local_final.len(),
        });
    }
    let c = policy.resolved_threshold()?;
    let c = match policy.units {
        ThresholdUnits::Update => c,
        ThresholdUnits::Direction => {
            return Err(Error::InvalidArgument(
                "direction-unit thresholds must be converted with in_update_units".into(),
            ))
        }
    };
    Ok(match policy.mode {
        ClipMode::None => {
            let d = x_local_final - x_round_start;
            PolicyOutput {
                preclip_norm: d.norm(),
                transmitted: d,
                factor: 1.0,
            }
        }
        ClipMode::Difference => {
            let d = x_local_final - x_round_start;
            let n = d.norm();
            PolicyOutput {
                transmitted: clip(&d, c),
                factor: factor_from_norm(n, c),
                preclip_norm: n,
            }
        }
        ClipMode::Model => {
            let n = x_local_final.norm();
            PolicyOutput {
                transmitted: clip(x_local_final, c),
                factor: factor_from_norm(n, c),
                preclip_norm: n,
            }
        }
    })
}

/// `ρ · mean(recorded_norms)`.
pub fn resolve_auto_threshold(recorded_norms: &[f64], rho: f64) -> Result<f64> {
    if recorded_norms.is_empty() {
        return Err(Error::Empty("recorded update norms"));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    Ok(rho * recorded_norms.iter().sum::<f64>() / recorded_norms.len() as f64)
}

/// Clipping factors of one round across all `N` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFactors {
    /// Realized factor `α_i` from the realized pre-clip norm.
    pub alpha: Vec<f64>,
    /// Expected-path factor `α̃_i` from the norm of the expected pre-clip quantity.
    pub alpha_tilde: Vec<f64>,
    /// `ᾱ = mean_i α̃_i` over all clients.
    pub alpha_bar: f64,
}

impl ClipFactors {
    pub fn from_norms(realized: &[f64], expected: &[f64], c: f64) -> Result<Self> {
        if realized.len() != expected.len() {
            return Err(Error::DimensionMismatch {
                expected: realized.len(),
                found: expected.len(),
            });
        }
        if realized.is_empty() {
            return Err(Error::Empty("client norms"));
        }
        let alpha: Vec<f64> = realized.iter().map(|&n| factor_from_norm(n, c)).collect();
        let alpha_tilde: Vec<f64> = expected.iter().map(|&n| factor_from_norm(n, c)).collect();
        let alpha_bar = alpha_tilde.iter().sum::<f64>() / alpha_tilde.len() as f64;
        Ok(Self {
            alpha,
            alpha_tilde,
            alpha_bar,
        })
    }
}
