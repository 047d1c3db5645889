//! Post-processing of round traces: clipping-bias terms, the convergence
//! bound and its pieces, the local-drift check, and update distributions.

mod bound;
mod distribution;
mod emit;

pub use bound::{
    corollary1_bound, measured_weighted_grad_norm, theorem1_bound, BoundBreakdown, BoundInputs,
    CorollaryBound, CorollaryInputs, RegimeFlags,
};
pub use distribution::{update_distribution, RoundDistribution, UpdatePoint};
pub use emit::{write_bias_csv, write_bound_json, write_scatter_csv};

use serde::{Deserialize, Serialize};

use crate::engine::{RoundDiagnostics, RoundRecord, RunConfig};
use crate::problems::ProblemInstance;
use crate::{Error, Result};

/// Clipping-factor gaps of one round, averaged over all `N` clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundBias {
    pub t: usize,
    /// `(1/N) Σ_i |α_i − α̃_i|`.
    pub intra_abs: f64,
    /// `(1/N) Σ_i |α̃_i − ᾱ|`.
    pub cross_abs: f64,
    /// `(1/N) Σ_i |α_i − α̃_i|²`.
    pub intra_sq: f64,
    /// `(1/N) Σ_i |α̃_i − ᾱ|²`.
    pub cross_sq: f64,
    pub alpha_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub rounds: Vec<RoundBias>,
    /// `γ₁ = (1/T) Σ_t ᾱ^t`.
    pub gamma1: f64,
    /// `γ₂ = (1/T) Σ_t (ᾱ^t)²`.
    pub gamma2: f64,
}

impl BiasReport {
    /// `(1/T) Σ_t (intra_abs + cross_abs)`.
    pub fn mean_abs_gap(&self) -> f64 {
        mean(self.rounds.iter().map(|r| r.intra_abs + r.cross_abs))
    }

    /// `(1/T) Σ_t (intra_sq + cross_sq)`.
    pub fn mean_sq_gap(&self) -> f64 {
        mean(self.rounds.iter().map(|r| r.intra_sq + r.cross_sq))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn diagnostics_of(rec: &RoundRecord) -> Result<&RoundDiagnostics> {
    rec.diagnostics.as_ref().ok_or(Error::MissingDiagnostics(rec.t))
}

/// Bias terms from a trace recorded with diagnostics on.
pub fn clip_bias_terms(trace: &[RoundRecord]) -> Result<BiasReport> {
    if trace.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let mut rounds = Vec::with_capacity(trace.len());
    for rec in trace {
        let d = diagnostics_of(rec)?;
        let n = d.alpha.len() as f64;
        let intra = d.alpha.iter().zip(&d.alpha_tilde).map(|(a, b)| (a - b).abs());
        let cross = d.alpha_tilde.iter().map(|a| (a - d.alpha_bar).abs());
        rounds.push(RoundBias {
            t: rec.t,
            intra_abs: intra.clone().sum::<f64>() / n,
            cross_abs: cross.clone().sum::<f64>() / n,
            intra_sq: intra.map(|v| v * v).sum::<f64>() / n,
            cross_sq: cross.map(|v| v * v).sum::<f64>() / n,
            alpha_bar: d.alpha_bar,
        });
    }
    Ok(BiasReport {
        gamma1: mean(rounds.iter().map(|r| r.alpha_bar)),
        gamma2: mean(rounds.iter().map(|r| r.alpha_bar * r.alpha_bar)),
        rounds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub t: usize,
    pub q: usize,
    /// Measured `(1/N) Σ_i ‖x^t − x_i^{t,q}‖²`.
    pub lhs: f64,
    /// Standard error of `lhs`; 0 when exact.
    pub stderr: f64,
    /// `5Qη_l²(σ_l² + 6Qσ_g²) + 30Q²η_l²‖∇f(x^t)‖²`.
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub points: Vec<DriftPoint>,
    pub all_pass: bool,
    /// One-sided confidence behind each Monte Carlo pass flag; `None` when exact.
    pub confidence: Option<f64>,
}

/// Standard errors a Monte Carlo estimate may exceed the bound by and still pass.
const DRIFT_Z: f64 = 3.0;

/// Compares measured local drift with the analytic drift bound.
pub fn drift_check(trace: &[RoundRecord], problem: &ProblemInstance, config: &RunConfig) -> Result<DriftReport> {
    let q_steps = config.local_steps.finite().ok_or_else(|| {
        Error::InvalidArgument("drift check needs a finite number of local steps".into())
    })? as f64;
    let c = problem.constants();
    let (sl2, sg2) = (c.sigma_l.value.powi(2), c.sigma_g.value.powi(2));
    let eta2 = config.eta_l * config.eta_l;
    let mut points = Vec::new();
    let mut monte_carlo = false;
    for rec in trace {
        let d = diagnostics_of(rec)?;
        monte_carlo |= d.replays > 0;
        let rhs = 5.0 * q_steps * eta2 * (sl2 + 6.0 * q_steps * sg2)
            + 30.0 * q_steps * q_steps * eta2 * rec.global_grad_norm.powi(2);
        for (q, &lhs) in d.drift.iter().enumerate() {
            let stderr = d.drift_stderr.get(q).copied().unwrap_or(0.0);
            points.push(DriftPoint {
                t: rec.t,
                q,
                lhs,
                stderr,
                rhs,
                pass: lhs - DRIFT_Z * stderr <= rhs,
            });
        }
    }
    Ok(DriftReport {
        all_pass: points.iter().all(|p| p.pass),
        confidence: monte_carlo.then_some(0.99865),
        points,
    })
}
