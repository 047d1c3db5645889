//! One parameterized FedAvg loop covering plain, clipping-enabled and
//! differentially private variants.
//!
//! A round samples `P` clients with replacement, runs `Q` local SGD steps on
//! each, applies the clipping policy, optionally adds Gaussian noise on the
//! client side, and moves the global model by `η_g` times the mean of the
//! transmissions. With no clipping and no noise this is plain FedAvg.
//!
//! All randomness comes from keyed streams (see [`crate::rng`]), and the
//! aggregation sums transmissions in (client id, duplicate index) order, so a
//! run is bit-reproducible for any thread count.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clipping::{
    apply_policy, resolve_auto_threshold, ClipFactors, ClipMode, ClippingPolicy,
};
use crate::privacy::{calibrate_noise, draw_noise, NoiseCalibration, NoiseSpec, PrivacyConfig};
use crate::problems::{GradientOracle, ProblemInstance};
use crate::rng::{Purpose, StreamKey};
use crate::{Error, ModelVector, Result};

/// Norm above which an iterate is treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;
/// Step-size tolerance ending an until-converged local phase.
pub const LOCAL_CONVERGENCE_TOL: f64 = 1e-12;
/// Step cap of an until-converged local phase.
pub const LOCAL_MAX_STEPS: usize = 1_000_000;

/// Number of local steps per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalSteps {
    Finite(usize),
    /// Run local gradient steps until the step length falls below
    /// [`LOCAL_CONVERGENCE_TOL`] (or [`LOCAL_MAX_STEPS`] is reached).
    UntilConverged,
}

impl LocalSteps {
    pub fn finite(&self) -> Option<usize> {
        match self {
            Self::Finite(q) => Some(*q),
            Self::UntilConverged => None,
        }
    }
}

impl fmt::Display for LocalSteps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(q) => write!(f, "{q}"),
            Self::UntilConverged => f.write_str("inf"),
        }
    }
}

impl Serialize for LocalSteps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Finite(q) => s.serialize_u64(*q as u64),
            Self::UntilConverged => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for LocalSteps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(q) => Ok(Self::Finite(q as usize)),
            Raw::Text(s) if s == "inf" => Ok(Self::UntilConverged),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "local_steps must be a positive integer or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `T`.
    pub rounds: usize,
    /// `Q`.
    pub local_steps: LocalSteps,
    /// `P`, clients sampled with replacement per round.
    pub sampled_clients: usize,
    /// Every client participates exactly once per round instead of being sampled.
    #[serde(default)]
    pub full_participation: bool,
    pub eta_l: f64,
    pub eta_g: f64,
    #[serde(default)]
    pub policy: ClippingPolicy,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub seed: u64,
    /// Starting point; the problem's default initialization when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Replays used to estimate expected-path quantities under stochastic gradients.
    #[serde(default = "default_replays")]
    pub expectation_replays: usize,
    /// Evaluate every client every round for the bias and drift diagnostics.
    #[serde(default = "default_true")]
    pub diagnostics: bool,
}

fn default_replays() -> usize {
    32
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(rounds: usize, local_steps: LocalSteps, sampled_clients: usize, eta_l: f64, eta_g: f64) -> Self {
        Self {
            rounds,
            local_steps,
            sampled_clients,
            full_participation: false,
            eta_l,
            eta_g,
            policy: ClippingPolicy::none(),
            privacy: PrivacyConfig::default(),
            seed: 0,
            x0: None,
            expectation_replays: default_replays(),
            diagnostics: true,
        }
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        if !self.full_participation && !(1..=clients).contains(&self.sampled_clients) {
            return Err(Error::InvalidConfig(format!(
                "sampled_clients must lie in [1, {clients}], got {}",
                self.sampled_clients
            )));
        }
        if self.local_steps == LocalSteps::Finite(0) {
            return Err(Error::InvalidConfig("local_steps must be at least 1".into()));
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite() && self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "stepsizes must be positive, got eta_l = {}, eta_g = {}",
                self.eta_l, self.eta_g
            )));
        }
        if self.expectation_replays == 0 {
            return Err(Error::InvalidConfig("expectation_replays must be positive".into()));
        }
        self.policy.validate()?;
        if self.privacy.enabled {
            self.privacy.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    /// Participants per round: `N` under full participation, else `P`.
    pub fn participants(&self, clients: usize) -> usize {
        if self.full_participation {
            clients
        } else {
            self.sampled_clients
        }
    }
}

/// Result of one client's local phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub x_final: ModelVector,
    /// `Σ_q g^{q}`; `x_final − x_start = −η_l · grad_sum`.
    pub grad_sum: ModelVector,
    pub steps: usize,
    /// `‖x_start − x^{q}‖²` for `q = 0..Q−1`, when requested.
    pub drift: Vec<f64>,
}

/// Runs local SGD from `x_start`. Divergence is reported with round 0; the
/// engine rewrites it with the actual round.
pub fn local_update(
    oracle: &mut GradientOracle<'_>,
    x_start: &ModelVector,
    steps: LocalSteps,
    eta_l: f64,
    record_drift: bool,
) -> Result<LocalResult> {
    let mut x = x_start.clone();
    let mut grad_sum = ModelVector::zeros(x.len());
    let mut drift = Vec::new();
    let cap = steps.finite().unwrap_or(LOCAL_MAX_STEPS);
    let mut taken = 0;
    while taken < cap {
        if record_drift {
            drift.push((x_start - &x).norm_squared());
        }
        let g = oracle.sample_gradient(&x);
        let step = &g * eta_l;
        x -= &step;
        grad_sum += &g;
        taken += 1;
        let norm = x.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { round: 0, norm });
        }
        if steps == LocalSteps::UntilConverged && step.norm() <= LOCAL_CONVERGENCE_TOL {
            break;
        }
    }
    Ok(LocalResult {
        x_final: x,
        grad_sum,
        steps: taken,
        drift,
    })
}

/// `P` i.i.d. uniform draws from `0..N`, duplicates allowed.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, sampled: usize, rng: &mut R) -> Vec<usize> {
    (0..sampled).map(|_| rng.random_range(0..clients)).collect()
}

/// Angle in degrees between two vectors; `None` when either has zero norm.
pub fn angle_degrees(a: &ModelVector, b: &ModelVector) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let cos = (a.dot(b) / (na * nb)).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// What a client hands to the server: the clipped update plus its privacy
/// noise. The raw clipped update is not reachable from here.
#[derive(Debug, Clone)]
pub struct Transmission {
    payload: ModelVector,
}

impl Transmission {
    pub fn payload(&self) -> &ModelVector {
        &self.payload
    }
}

/// Client side of a round after local training: clip, then perturb.
pub fn client_transmit<R: Rng + ?Sized>(
    policy: &ClippingPolicy,
    noise: Option<&NoiseSpec>,
    local: &LocalResult,
    x_start: &ModelVector,
    rng: &mut R,
) -> Result<(Transmission, f64, f64)> {
    let out = apply_policy(policy, &local.x_final, x_start)?;
    let mut payload = out.transmitted;
    if let Some(spec) = noise {
        payload += draw_noise(spec, rng);
    }
    Ok((Transmission { payload }, out.factor, out.preclip_norm))
}

/// Mean update direction formed by the server from the transmissions, summed
/// in the given order. Under model clipping the transmissions are models and
/// the difference to `x_t` is taken here.
pub fn aggregate(transmissions: &[Transmission], x_t: &ModelVector, mode: ClipMode) -> ModelVector {
    let mut sum = ModelVector::zeros(x_t.len());
    for tr in transmissions {
        match mode {
            ClipMode::Model => sum += tr.payload() - x_t,
            _ => sum += tr.payload(),
        }
    }
    sum / transmissions.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub t: usize,
    pub x: ModelVector,
    /// Mean transmitted update of the previous round.
    pub prev_mean_update: Option<ModelVector>,
}

/// Per-participant telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub duplicate: usize,
    /// `‖x_i^{t,Q} − x^t‖`.
    pub delta_norm: f64,
    /// Norm of the quantity the policy clips.
    pub preclip_norm: f64,
    pub clip_factor: f64,
    /// Angle to the previous round's mean transmitted update; `null` in round 0.
    pub angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise_stream: Option<u64>,
}

/// All-client diagnostics of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    /// Realized pre-clip norm per client.
    pub realized_norms: Vec<f64>,
    /// Norm of the expected pre-clip quantity per client.
    pub expected_norms: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_tilde: Vec<f64>,
    pub alpha_bar: f64,
    /// `(1/N) Σ_i ‖x^t − x_i^{t,q}‖²` per local step `q`.
    pub drift: Vec<f64>,
    /// Standard error of `drift` across replays; empty when exact.
    pub drift_stderr: Vec<f64>,
    /// Replays behind the expected-path estimates; 0 when exact.
    pub replays: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub loss: f64,
    pub global_grad_norm: f64,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientRecord>,
    pub mean_update_norm: f64,
    pub alpha_bar: Option<f64>,
    pub gradient_bound_violations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<RoundDiagnostics>,
}

/// A configured run over one problem.
pub struct Engine<'a> {
    problem: &'a ProblemInstance,
    config: RunConfig,
    policy: ClippingPolicy,
    noise: Option<NoiseSpec>,
    calibration: Option<NoiseCalibration>,
}

impl<'a> Engine<'a> {
    /// The policy threshold must already be resolved.
    pub fn new(problem: &'a ProblemInstance, config: RunConfig) -> Result<Self> {
        config.validate(problem.num_clients())?;
        if let Some(x0) = &config.x0 {
            if x0.len() != problem.dimension() {
                return Err(Error::InvalidConfig(format!(
                    "x0 has dimension {}, problem has {}",
                    x0.len(),
                    problem.dimension()
                )));
            }
        }
        let policy = config.policy.in_update_units(config.eta_l)?;
        let calibration = if config.privacy.enabled {
            let c = policy.resolved_threshold()?;
            Some(
                calibrate_noise(
                    &config.privacy,
                    c,
                    config.participants(problem.num_clients()),
                    problem.num_clients(),
                    config.rounds,
                    problem.dimension(),
                )
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            problem,
            noise: calibration.as_ref().map(|c| c.spec),
            calibration,
            policy,
            config,
        })
    }

    /// Convenience for configs without privacy where `σ²` is given directly.
    pub fn with_noise(mut self, spec: NoiseSpec) -> Self {
        self.noise = if spec.sigma2 > 0.0 { Some(spec) } else { None };
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Policy with its threshold in update units.
    pub fn policy(&self) -> &ClippingPolicy {
        &self.policy
    }

    pub fn noise(&self) -> Option<&NoiseSpec> {
        self.noise.as_ref()
    }

    pub fn calibration(&self) -> Option<&NoiseCalibration> {
        self.calibration.as_ref()
    }

    pub fn initial_state(&self) -> RoundState {
        let x = match &self.config.x0 {
            Some(v) => ModelVector::from_column_slice(v),
            None => self.problem.initial_point(self.config.seed),
        };
        RoundState {
            t: 0,
            x,
            prev_mean_update: None,
        }
    }

    fn local_run(
        &self,
        x: &ModelVector,
        key: StreamKey,
        record_drift: bool,
        round: usize,
    ) -> Result<(LocalResult, usize)> {
        let mut oracle = self.problem.oracle(key.client as usize, key.rng());
        let res = local_update(
            &mut oracle,
            x,
            self.config.local_steps,
            self.config.eta_l,
            record_drift,
        )
        .map_err(|e| match e {
            Error::Divergence { norm, .. } => Error::Divergence { round, norm },
            other => other,
        })?;
        Ok((res, oracle.violations()))
    }

    fn participants(&self, t: usize) -> Vec<(usize, usize)> {
        let n = self.problem.num_clients();
        let mut ids = if self.config.full_participation {
            (0..n).collect()
        } else {
            let mut rng = StreamKey::new(self.config.seed, Purpose::ClientSampling)
                .round(t)
                .rng();
            sample_clients(n, self.config.sampled_clients, &mut rng)
        };
        ids.sort_unstable();
        let mut out = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let dup = if k > 0 && ids[k - 1] == id {
                out.last().map(|&(_, d): &(usize, usize)| d + 1).unwrap()
            } else {
                0
            };
            out.push((id, dup));
        }
        out
    }

    fn preclip_quantity_norm(&self, x_final: &ModelVector, x_t: &ModelVector) -> f64 {
        match self.policy.mode {
            ClipMode::Model => x_final.norm(),
            _ => (x_final - x_t).norm(),
        }
    }

    pub fn run_round(&self, state: &RoundState) -> Result<(RoundState, RoundRecord)> {
        let t = state.t;
        let x_t = &state.x;
        let n = self.problem.num_clients();
        let seed = self.config.seed;
        let diag = self.config.diagnostics;
        let participants = self.participants(t);

        // Every (client, duplicate) that needs a local phase. Duplicate 0 of
        // each client doubles as its diagnostic trajectory.
        let mut work: Vec<(usize, usize)> = participants.clone();
        if diag {
            for i in 0..n {
                if !participants.contains(&(i, 0)) {
                    work.push((i, 0));
                }
            }
            work.sort_unstable();
        }
        let record_drift = diag && self.config.local_steps.finite().is_some();
        let results: Vec<(LocalResult, usize)> = work
            .par_iter()
            .map(|&(i, dup)| {
                let key = StreamKey::new(seed, Purpose::LocalGradient)
                    .round(t)
                    .client(i)
                    .slot(dup);
                self.local_run(x_t, key, record_drift && dup == 0, t)
            })
            .collect::<Result<_>>()?;
        let lookup = |i: usize, dup: usize| -> &LocalResult {
            let k = work.binary_search(&(i, dup)).expect("scheduled work item");
            &results[k].0
        };
        let mut violations: usize = results.iter().map(|r| r.1).sum();

        let mut transmissions = Vec::with_capacity(participants.len());
        let mut client_records = Vec::with_capacity(participants.len());
        for &(i, dup) in &participants {
            let local = lookup(i, dup);
            let noise_key = StreamKey::new(seed, Purpose::PrivacyNoise)
                .round(t)
                .client(i)
                .slot(dup);
            let (tr, factor, preclip) = client_transmit(
                &self.policy,
                self.noise.as_ref(),
                local,
                x_t,
                &mut noise_key.rng(),
            )?;
            let delta = &local.x_final - x_t;
            client_records.push(ClientRecord {
                client: i,
                duplicate: dup,
                delta_norm: delta.norm(),
                preclip_norm: preclip,
                clip_factor: factor,
                angle_deg: state
                    .prev_mean_update
                    .as_ref()
                    .and_then(|g| angle_degrees(&delta, g)),
                noise_stream: self.noise.map(|_| noise_key.stream_id()),
            });
            transmissions.push(tr);
        }

        let mean_update = aggregate(&transmissions, x_t, self.policy.mode);
        let x_next = x_t + &mean_update * self.config.eta_g;
        let norm = x_next.norm();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { round: t, norm });
        }

        let diagnostics = if diag {
            let (d, v) = self.round_diagnostics(t, x_t, &lookup)?;
            violations += v;
            Some(d)
        } else {
            None
        };

        let record = RoundRecord {
            t,
            x_t: x_t.iter().copied().collect(),
            loss: self.problem.loss(x_t),
            global_grad_norm: self.problem.gradient(x_t).norm(),
            sampled: participants.iter().map(|p| p.0).collect(),
            clients: client_records,
            mean_update_norm: mean_update.norm(),
            alpha_bar: diagnostics.as_ref().map(|d| d.alpha_bar),
            gradient_bound_violations: violations,
            diagnostics,
        };
        let next = RoundState {
            t: t + 1,
            x: x_next,
            prev_mean_update: Some(mean_update),
        };
        Ok((next, record))
    }

    fn round_diagnostics<'r>(
        &self,
        t: usize,
        x_t: &ModelVector,
        lookup: &dyn Fn(usize, usize) -> &'r LocalResult,
    ) -> Result<(RoundDiagnostics, usize)> {
        let n = self.problem.num_clients();
        let c = self.policy.resolved_threshold()?;
        let realized: Vec<f64> = (0..n)
            .map(|i| self.preclip_quantity_norm(&lookup(i, 0).x_final, x_t))
            .collect();

        if self.problem.noise().is_deterministic() {
            let factors = ClipFactors::from_norms(&realized, &realized, c)?;
            let drift = mean_drift((0..n).map(|i| lookup(i, 0).drift.as_slice()));
            return Ok((
                RoundDiagnostics {
                    expected_norms: realized.clone(),
                    realized_norms: realized,
                    alpha: factors.alpha,
                    alpha_tilde: factors.alpha_tilde,
                    alpha_bar: factors.alpha_bar,
                    drift,
                    drift_stderr: Vec::new(),
                    replays: 0,
                },
                0,
            ));
        }

        // Expected-path quantities: average the local trajectory's endpoint
        // over independent replays before taking the norm.
        let r = self.config.expectation_replays;
        let record_drift = self.config.local_steps.finite().is_some();
        let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..r).map(move |k| (i, k))).collect();
        let replays: Vec<(LocalResult, usize)> = jobs
            .par_iter()
            .map(|&(i, k)| {
                let key = StreamKey::new(self.config.seed, Purpose::ExpectationReplay)
                    .round(t)
                    .client(i)
                    .slot(k);
                self.local_run(x_t, key, record_drift, t)
            })
            .collect::<Result<_>>()?;
        let violations = replays.iter().map(|x| x.1).sum();
        let mut expected = Vec::with_capacity(n);
        for i in 0..n {
            let mean_final = replays[i * r..(i + 1) * r]
                .iter()
                .fold(ModelVector::zeros(x_t.len()), |acc, (res, _)| acc + &res.x_final)
                / r as f64;
            expected.push(self.preclip_quantity_norm(&mean_final, x_t));
        }
        let factors = ClipFactors::from_norms(&realized, &expected, c)?;

        let (drift, drift_stderr) = if record_drift {
            let per_replay: Vec<Vec<f64>> = (0..r)
                .map(|k| mean_drift((0..n).map(|i| replays[i * r + k].0.drift.as_slice())))
                .collect();
            let steps = per_replay[0].len();
            let mut mean = vec![0.0; steps];
            let mut se = vec![0.0; steps];
            for q in 0..steps {
                let vals: Vec<f64> = per_replay.iter().map(|v| v[q]).collect();
                let m = vals.iter().sum::<f64>() / r as f64;
                let var = if r > 1 {
                    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r - 1) as f64
                } else {
                    0.0
                };
                mean[q] = m;
                se[q] = (var / r as f64).sqrt();
            }
            (mean, se)
        } else {
            (Vec::new(), Vec::new())
        };

        Ok((
            RoundDiagnostics {
                realized_norms: realized,
                expected_norms: expected,
                alpha: factors.alpha,
                alpha_tilde: factors.alpha_tilde,
                alpha_bar: factors.alpha_bar,
                drift,
                drift_stderr,
                replays: r,
            },
            violations,
        ))
    }

    /// Runs all `T` rounds from the initial state.
    pub fn run(&self) -> Result<Vec<RoundRecord>> {
        let mut state = self.initial_state();
        let mut records = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            let (next, rec) = self.run_round(&state)?;
            records.push(rec);
            state = next;
        }
        Ok(records)
    }

    /// Runs all rounds and also returns the final iterate `x^T`.
    pub fn run_to_end(&self) -> Result<(Vec<RoundRecord>, ModelVector)> {
        let mut state = self.initial_state();
        let mut records = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            let (next, rec) = self.run_round(&state)?;
            records.push(rec);
            state = next;
        }
        Ok((records, state.x))
    }
}

fn mean_drift<'s>(per_client: impl Iterator<Item = &'s [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for d in per_client {
        if sum.is_empty() {
            sum = vec![0.0; d.len()];
        }
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
        count += 1;
    }
    if count > 0 {
        for s in &mut sum {
            *s /= count as f64;
        }
    }
    sum
}

/// Everything a full experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub final_x: ModelVector,
    /// Threshold actually used, in update units; `inf` when not clipping.
    pub threshold: f64,
    /// Mean update magnitude of the unclipped phase-1 run, when the
    /// threshold was resolved automatically.
    pub phase1_mean_norm: Option<f64>,
    pub calibration: Option<NoiseCalibration>,
}

/// Runs an experiment, resolving an `auto` threshold first: an unclipped
/// run of the same length records the mean update magnitude `Δ̄` over
/// participants and rounds, then the clipped run restarts from `x⁰` with
/// `c = ρ Δ̄`.
///
/// `threads` sizes a dedicated worker pool; results do not depend on it.
pub fn run_experiment(
    problem: &ProblemInstance,
    config: &RunConfig,
    threads: Option<usize>,
) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| run_two_phase(problem, config))
}

/// [`run_experiment`] on the current rayon pool.
pub fn run_two_phase(problem: &ProblemInstance, config: &RunConfig) -> Result<ExperimentOutput> {
    config.validate(problem.num_clients())?;
    let mut config = config.clone();
    let mut phase1_mean_norm = None;
    if config.policy.is_auto() {
        let rho = match config.policy.threshold {
            crate::clipping::Threshold::Auto { auto } => auto,
            _ => unreachable!(),
        };
        let mut phase1 = config.clone();
        phase1.policy = ClippingPolicy::none();
        phase1.privacy.enabled = false;
        phase1.diagnostics = false;
        let records = Engine::new(problem, phase1)?.run()?;
        let norms: Vec<f64> = records
            .iter()
            .flat_map(|r| r.clients.iter().map(|c| c.delta_norm))
            .collect();
        let c = resolve_auto_threshold(&norms, rho)?;
        if !(c > 0.0) {
            return Err(Error::InvalidConfig(
                "phase-1 run recorded zero update magnitude; cannot set a threshold".into(),
            ));
        }
        phase1_mean_norm = Some(c / rho);
        config.policy.threshold = crate::clipping::Threshold::Fixed(c);
        config.policy.units = crate::clipping::ThresholdUnits::Update;
    }
    let engine = Engine::new(problem, config)?;
    let (records, final_x) = engine.run_to_end()?;
    Ok(ExperimentOutput {
        records,
        final_x,
        threshold: engine.policy().resolved_threshold()?,
        phase1_mean_norm,
        calibration: engine.calibration().cloned(),
    })
}
