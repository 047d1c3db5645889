use serde::{Deserialize, Serialize};

use super::BiasReport;
use crate::engine::{RoundRecord, RunConfig};
use crate::problems::ProblemInstance;
use crate::{Error, Result};

/// Everything the nonconvex bound depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `f(x⁰) − f*`.
    pub f_gap: f64,
    pub lipschitz: f64,
    pub sigma_l: f64,
    pub sigma_g: f64,
    /// `G`; `None` when no bound is available.
    pub gradient_bound: Option<f64>,
    pub dimension: usize,
    pub eta_l: f64,
    pub eta_g: f64,
    pub local_steps: usize,
    pub rounds: usize,
    pub sampled: usize,
    pub clients: usize,
    /// Per-coordinate privacy noise variance.
    pub sigma2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// `(1/T) Σ_t (1/N) Σ_i (|α − α̃| + |α̃ − ᾱ|)`.
    pub bias_abs: f64,
    /// `(1/T) Σ_t (1/N) Σ_i (|α − α̃|² + |α̃ − ᾱ|²)`.
    pub bias_sq: f64,
    /// Oracle draws that exceeded `G` during the run.
    pub gradient_bound_violations: usize,
}

impl BoundInputs {
    /// Inputs for a finished run: constants from the problem, bias terms from
    /// the report, and `f(x⁰) − f*` from the first record.
    pub fn from_run(
        problem: &ProblemInstance,
        config: &RunConfig,
        trace: &[RoundRecord],
        report: &BiasReport,
        sigma2: f64,
    ) -> Result<Self> {
        let first = trace.first().ok_or(Error::Empty("trace"))?;
        let f_star = problem.f_star().ok_or_else(|| {
            Error::InvalidArgument("bound needs a known optimal value f*".into())
        })?;
        let q = config.local_steps.finite().ok_or_else(|| {
            Error::InvalidArgument("bound needs a finite number of local steps".into())
        })?;
        let c = problem.constants();
        Ok(Self {
            f_gap: first.loss - f_star,
            lipschitz: c.lipschitz.value,
            sigma_l: c.sigma_l.value,
            sigma_g: c.sigma_g.value,
            gradient_bound: c.gradient_bound.map(|g| g.value),
            dimension: problem.dimension(),
            eta_l: config.eta_l,
            eta_g: config.eta_g,
            local_steps: q,
            rounds: trace.len(),
            sampled: config.participants(problem.num_clients()),
            clients: problem.num_clients(),
            sigma2,
            gamma1: report.gamma1,
            gamma2: report.gamma2,
            bias_abs: report.mean_abs_gap(),
            bias_sq: report.mean_sq_gap(),
            gradient_bound_violations: trace.iter().map(|r| r.gradient_bound_violations).sum(),
        })
    }
}

/// Stepsize conditions the bound assumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeFlags {
    /// `η_g η_l ≤ min{P/(48Q), P/(6QL(P−1))}`.
    pub product: bool,
    /// `η_l ≤ 1/(√60 Q L)`.
    pub local: bool,
}

impl RegimeFlags {
    pub fn holds(&self) -> bool {
        self.product && self.local
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub initial_gap: f64,
    pub drift: f64,
    pub sampling_variance: f64,
    pub privacy_noise: f64,
    pub clipping_bias_abs: f64,
    pub clipping_bias_sq: f64,
    pub total: f64,
    pub regime: RegimeFlags,
    /// False when the stepsize regime fails or `G` is missing or was exceeded.
    pub certified: bool,
}

/// `G² · s`, taking `0` when `s = 0` even if `G` is unknown.
fn g2_times(g: Option<f64>, s: f64) -> f64 {
    if s == 0.0 {
        0.0
    } else {
        g.map_or(f64::INFINITY, |g| g * g * s)
    }
}

/// Evaluates the bound on `(1/T) Σ_t E[ᾱ^t ‖∇f(x^t)‖²]` term by term.
pub fn theorem1_bound(inp: &BoundInputs) -> Result<BoundBreakdown> {
    let (eta_l, eta_g, l) = (inp.eta_l, inp.eta_g, inp.lipschitz);
    let q = inp.local_steps as f64;
    let t = inp.rounds as f64;
    let p = inp.sampled as f64;
    if !(eta_l > 0.0 && eta_g > 0.0 && l > 0.0) || inp.local_steps == 0 || inp.rounds == 0 || inp.sampled == 0 {
        return Err(Error::InvalidArgument(
            "bound needs positive stepsizes, L, Q, T and P".into(),
        ));
    }
    let initial_gap = 4.0 * inp.f_gap / (eta_g * eta_l * q * t);
    let drift = 12.5 * eta_l * eta_l * l * q * (inp.sigma_l.powi(2) + 6.0 * q * inp.sigma_g.powi(2)) * inp.gamma1;
    let sampling_variance = 6.0 * eta_g * eta_l * l * inp.sigma_l.powi(2) * inp.gamma2 / p;
    let privacy_noise = 2.0 * eta_g * l * inp.dimension as f64 * inp.sigma2 / (eta_l * p * q);
    let clipping_bias_abs = g2_times(inp.gradient_bound, 4.0 * inp.bias_abs);
    let clipping_bias_sq = g2_times(
        inp.gradient_bound,
        eta_g * eta_l * l * q * 6.0 * inp.bias_sq * inp.clients as f64 / p,
    );
    let second_cap = if inp.sampled > 1 {
        p / (6.0 * q * l * (p - 1.0))
    } else {
        f64::INFINITY
    };
    let regime = RegimeFlags {
        product: eta_g * eta_l <= (p / (48.0 * q)).min(second_cap),
        local: eta_l <= 1.0 / (60f64.sqrt() * q * l),
    };
    let total = initial_gap + drift + sampling_variance + privacy_noise + clipping_bias_abs + clipping_bias_sq;
    Ok(BoundBreakdown {
        initial_gap,
        drift,
        sampling_variance,
        privacy_noise,
        clipping_bias_abs,
        clipping_bias_sq,
        total,
        regime,
        certified: regime.holds() && inp.gradient_bound.is_some() && inp.gradient_bound_violations == 0,
    })
}

/// `(1/T) Σ_t ᾱ^t ‖∇f(x^t)‖²`, with `ᾱ^t = 1` for rounds without diagnostics.
pub fn measured_weighted_grad_norm(trace: &[RoundRecord]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    trace
        .iter()
        .map(|r| r.alpha_bar.unwrap_or(1.0) * r.global_grad_norm.powi(2))
        .sum::<f64>()
        / trace.len() as f64
}

/// Inputs of the private bound with `c = η_l Q c'` and `c' ≥ G`, where
/// clipping is inactive and `γ₁ = γ₂ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryInputs {
    pub eta_g: f64,
    pub eta_l: f64,
    pub local_steps: usize,
    pub rounds: usize,
    pub sampled: usize,
    pub clients: usize,
    pub dimension: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Calibration constant `v`.
    pub v: f64,
    /// `c'`, the per-step gradient clipping level.
    pub c_prime: f64,
    pub f_gap: f64,
    pub lipschitz: f64,
    pub sigma_l: f64,
    pub sigma_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryBound {
    pub initial_gap: f64,
    pub drift: f64,
    pub sampling_variance: f64,
    /// `2 η_g L d v η_l Q c'² T ln(1/δ) / (N² ε²)`.
    pub privacy_noise: f64,
    pub total: f64,
    /// `√d / (N ε)`, the rate scale attainable by tuning stepsizes.
    pub reference_scale: f64,
    pub constants: &'static str,
}

pub fn corollary1_bound(inp: &CorollaryInputs) -> CorollaryBound {
    let q = inp.local_steps as f64;
    let t = inp.rounds as f64;
    let p = inp.sampled as f64;
    let n = inp.clients as f64;
    let d = inp.dimension as f64;
    let initial_gap = 4.0 * inp.f_gap / (inp.eta_g * inp.eta_l * q * t);
    let drift = 12.5 * inp.eta_l.powi(2) * inp.lipschitz * q * (inp.sigma_l.powi(2) + 6.0 * q * inp.sigma_g.powi(2));
    let sampling_variance = 6.0 * inp.eta_g * inp.eta_l * inp.lipschitz * inp.sigma_l.powi(2) / p;
    let privacy_noise = 2.0 * inp.eta_g * inp.lipschitz * d * inp.v * inp.eta_l * q * inp.c_prime.powi(2) * t
        * (1.0 / inp.delta).ln()
        / (n * n * inp.epsilon * inp.epsilon);
    CorollaryBound {
        initial_gap,
        drift,
        sampling_variance,
        privacy_noise,
        total: initial_gap + drift + sampling_variance + privacy_noise,
        reference_scale: d.sqrt() / (n * inp.epsilon),
        constants: "nonprivate terms use the constants of the general bound with gamma1 = gamma2 = 1 and zero clipping bias",
    }
}
