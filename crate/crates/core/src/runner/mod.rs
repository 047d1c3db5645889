//! Config-driven experiment runner and its on-disk artifacts.
//!
//! A train run writes, under the output directory:
//!
//! ```text
//! config.toml            resolved configuration
//! manifest.json          seeds, rounds and per-seed directories
//! summary.csv            per-round mean and std over seeds
//! seed-<s>/rounds.jsonl  one RoundRecord per line
//! seed-<s>/run.json      threshold, calibration and final values
//! seed-<s>/summary.csv   per-round scalars
//! seed-<s>/bias.csv      clipping-factor gaps per round
//! seed-<s>/bound.json    bound breakdown next to the measured left side
//! seed-<s>/scatter/round-<t>.csv  (magnitude, angle) pairs
//! ```

mod compare;
pub mod config;
mod table1;

pub use compare::{compare, write_compare_csv, CompareReport, RoundDelta};
pub use config::{ExperimentConfig, LinearRegressionSpec, ProblemSpec, Table1Settings, Task};
pub use table1::{local_solve_steps, table1, write_table1_csv, Table1, Table1Cell};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    clip_bias_terms, measured_weighted_grad_norm, theorem1_bound, update_distribution, write_bias_csv,
    write_bound_json, write_scatter_csv, BoundInputs,
};
use crate::engine::{run_two_phase, ExperimentOutput, RoundRecord};
use crate::privacy::NoiseCalibration;
use crate::problems::ProblemInstance;
use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `out`.
    pub out: Option<PathBuf>,
    /// Runs this single seed instead of the configured list.
    pub seed_override: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub runs: Vec<String>,
}

/// Per-seed metadata written next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub seed: u64,
    /// Update-unit threshold; absent when nothing is clipped.
    pub threshold: Option<f64>,
    pub phase1_mean_norm: Option<f64>,
    pub calibration: Option<NoiseCalibration>,
    pub final_x: Vec<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io(path))?))
}

/// Executes a config and writes its artifacts.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Manifest> {
    cfg.validate()?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("no output directory given".into()))?;
    fs::create_dir_all(&out).map_err(io(&out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.task {
        Task::Train => run_train(cfg, opts, &out),
        Task::Table1 => run_table1(cfg, &out),
    })
}

fn run_table1(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let settings = cfg.table1.clone().unwrap_or_default();
    let table = table1(&settings)?;
    let path = out.join("table1.csv");
    let mut w = create(&path)?;
    write_table1_csv(&table, &mut w)?;
    w.flush().map_err(io(&path))?;
    let manifest = Manifest {
        task: Task::Table1,
        seeds: Vec::new(),
        rounds: 0,
        runs: Vec::new(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.to_string()))?;
    w.write_all(b"\n").map_err(io(path))?;
    w.flush().map_err(io(path))
}

fn run_train(cfg: &ExperimentConfig, opts: &RunOptions, out: &Path) -> Result<Manifest> {
    let problem = cfg.build_problem()?;
    let base = cfg.run.clone().expect("validated");
    let seeds = opts.seed_override.map_or_else(|| cfg.seed_list(), |s| vec![s]);

    let mut resolved = cfg.clone();
    resolved.seeds = seeds.clone();
    resolved.out = Some(out.display().to_string());
    let text = resolved.to_toml()?;
    fs::write(out.join("config.toml"), text).map_err(io(out))?;

    let outputs: Vec<Result<ExperimentOutput>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rc = base.clone();
            rc.seed = seed;
            run_two_phase(&problem, &rc)
        })
        .collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut traces = Vec::with_capacity(seeds.len());
    for (&seed, output) in seeds.iter().zip(outputs) {
        let output = output?;
        let dir_name = format!("seed-{seed}");
        let mut rc = base.clone();
        rc.seed = seed;
        write_seed_dir(&problem, &rc, &output, &out.join(&dir_name))?;
        runs.push(dir_name);
        traces.push(output.records);
    }
    write_pooled_summary(&traces, &out.join("summary.csv"))?;
    let manifest = Manifest {
        task: Task::Train,
        seeds,
        rounds: base.rounds,
        runs,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct SummaryRow {
    t: usize,
    loss: f64,
    grad_norm: f64,
    mean_update_norm: f64,
    alpha_bar: Option<f64>,
    delta_norm_mean: f64,
    delta_norm_var: f64,
    clipped_fraction: f64,
}

#[derive(Serialize)]
struct Unavailable<'a> {
    available: bool,
    reason: &'a str,
}

fn write_seed_dir(
    problem: &ProblemInstance,
    config: &crate::engine::RunConfig,
    output: &ExperimentOutput,
    dir: &Path,
) -> Result<()> {
    let scatter_dir = dir.join("scatter");
    fs::create_dir_all(&scatter_dir).map_err(io(&scatter_dir))?;
    let trace = &output.records;

    let path = dir.join("rounds.jsonl");
    let mut w = create(&path)?;
    for rec in trace {
        serde_json::to_writer(&mut w, rec).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n").map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let dist = update_distribution(trace);
    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    for (rec, d) in trace.iter().zip(&dist) {
        let clipped = rec.clients.iter().filter(|c| c.clip_factor < 1.0).count();
        w.serialize(SummaryRow {
            t: rec.t,
            loss: rec.loss,
            grad_norm: rec.global_grad_norm,
            mean_update_norm: rec.mean_update_norm,
            alpha_bar: rec.alpha_bar,
            delta_norm_mean: d.mean_magnitude,
            delta_norm_var: d.var_magnitude,
            clipped_fraction: clipped as f64 / rec.clients.len().max(1) as f64,
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(io(&path))?;

    for d in &dist {
        let path = scatter_dir.join(format!("round-{:05}.csv", d.t));
        let mut w = create(&path)?;
        write_scatter_csv(d, &mut w)?;
        w.flush().map_err(io(&path))?;
    }

    let sigma2 = output.calibration.as_ref().map_or(0.0, |c| c.spec.sigma2);
    let bound_path = dir.join("bound.json");
    match clip_bias_terms(trace) {
        Ok(report) => {
            let path = dir.join("bias.csv");
            let mut w = create(&path)?;
            write_bias_csv(&report, &mut w)?;
            w.flush().map_err(io(&path))?;
            match BoundInputs::from_run(problem, config, trace, &report, sigma2) {
                Ok(inputs) => {
                    let bound = theorem1_bound(&inputs)?;
                    let mut w = create(&bound_path)?;
                    write_bound_json(&inputs, &bound, measured_weighted_grad_norm(trace), &mut w)?;
                    w.write_all(b"\n").map_err(io(&bound_path))?;
                    w.flush().map_err(io(&bound_path))?;
                }
                Err(e) => write_json(
                    &bound_path,
                    &Unavailable {
                        available: false,
                        reason: &e.to_string(),
                    },
                )?,
            }
        }
        Err(Error::MissingDiagnostics(_)) => write_json(
            &bound_path,
            &Unavailable {
                available: false,
                reason: "diagnostics disabled",
            },
        )?,
        Err(e) => return Err(e),
    }

    let x = &output.final_x;
    write_json(
        &dir.join("run.json"),
        &RunInfo {
            seed: config.seed,
            threshold: output.threshold.is_finite().then_some(output.threshold),
            phase1_mean_norm: output.phase1_mean_norm,
            calibration: output.calibration.clone(),
            final_x: x.iter().copied().collect(),
            final_loss: problem.loss(x),
            final_grad_norm: problem.gradient(x).norm(),
        },
    )
}

#[derive(Serialize)]
struct PooledRow {
    t: usize,
    seeds: usize,
    loss_mean: f64,
    loss_std: f64,
    grad_norm_mean: f64,
    grad_norm_std: f64,
    alpha_bar_mean: Option<f64>,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn write_pooled_summary(traces: &[Vec<RoundRecord>], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let rounds = traces.iter().map(Vec::len).min().unwrap_or(0);
    for t in 0..rounds {
        let loss: Vec<f64> = traces.iter().map(|tr| tr[t].loss).collect();
        let grad: Vec<f64> = traces.iter().map(|tr| tr[t].global_grad_norm).collect();
        let alpha: Option<Vec<f64>> = traces.iter().map(|tr| tr[t].alpha_bar).collect();
        let (loss_mean, loss_std) = mean_std(&loss);
        let (grad_norm_mean, grad_norm_std) = mean_std(&grad);
        w.serialize(PooledRow {
            t,
            seeds: traces.len(),
            loss_mean,
            loss_std,
            grad_norm_mean,
            grad_norm_std,
            alpha_bar_mean: alpha.map(|a| mean_std(&a).0),
        })
        .map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(io(path))
}

/// Reads a `rounds.jsonl` file.
pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(format!("{}: {e}", path.display()))))
        .collect()
}

/// Process exit code for an error: 2 for configuration problems, 3 for
/// divergence, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    round: Option<usize>,
}

/// One-line JSON description of an error for stderr.
pub fn error_json(err: &Error) -> String {
    let (kind, round) = match err {
        Error::InvalidConfig(_) => ("config", None),
        Error::Divergence { round, .. } => ("divergence", Some(*round)),
        Error::Io(_) => ("io", None),
        _ => ("runtime", None),
    };
    serde_json::to_string(&ErrorLine {
        error: kind,
        message: err.to_string(),
        round,
    })
    .expect("plain struct serializes")
}
