use std::io::Write;

use serde::Serialize;

use super::config::Table1Settings;
use crate::clipping::{ClippingPolicy, ThresholdUnits};
use crate::engine::{Engine, LocalSteps, RunConfig};
use crate::fixedpoint::{solve_fixed_point, GradientClipMap, LocalMinClipMap, OneRoundMap, SolveOptions};
use crate::problems::{slope_ensemble, ProblemInstance};
use crate::{Error, ModelVector, Result};

/// One cell of the stationary-point table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Cell {
    /// Threshold on the per-client direction; `inf` for no clipping.
    pub c: f64,
    /// `None` for exact local solves.
    pub local_steps: Option<usize>,
    pub solver: f64,
    pub solver_residual: f64,
    pub simulation: f64,
    /// `|mean_i clip(direction_i, c)|` at the simulated end point.
    pub simulation_residual: f64,
    /// Finite step count standing in for exact local solves in the simulation.
    pub simulated_local_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1 {
    /// Cells in the order `(c=inf, Q=1), (c=inf, Q=inf), (c=1, Q=1), (c=1, Q=inf)`.
    pub cells: Vec<Table1Cell>,
}

impl Table1 {
    pub fn cell(&self, c: f64, local_steps: Option<usize>) -> Option<&Table1Cell> {
        self.cells.iter().find(|x| x.c == c && x.local_steps == local_steps)
    }
}

/// Smallest `Q` with `max_i |1 − η_l A_iᵀA_i|^Q ≤ tol` on a scalar ensemble.
pub fn local_solve_steps(problem: &ProblemInstance, eta_l: f64, tol: f64) -> Result<usize> {
    let mut worst: f64 = 0.0;
    for f in problem.clients() {
        let gram = f
            .gram()
            .ok_or_else(|| Error::InvalidArgument("needs quadratic clients".into()))?;
        for mu in gram.symmetric_eigenvalues().iter() {
            worst = worst.max((1.0 - eta_l * mu).abs());
        }
    }
    if !(worst < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eta_l = {eta_l} does not contract every client"
        )));
    }
    if worst == 0.0 {
        return Ok(1);
    }
    Ok((tol.ln() / worst.ln()).ceil().max(1.0) as usize)
}

/// Solves and simulates the four cells for the slope ensemble.
///
/// Thresholds act on the per-client direction: the raw gradient for a
/// single local step, and `x_i* − x` for exact local solves.
pub fn table1(settings: &Table1Settings) -> Result<Table1> {
    let problem = slope_ensemble();
    let x0 = ModelVector::from_element(1, settings.x0);
    let opts = SolveOptions {
        tol: settings.tol,
        ..SolveOptions::default()
    };
    let q_big = local_solve_steps(&problem, settings.eta_l, settings.contraction_tol)?;
    let mut cells = Vec::with_capacity(4);
    for c in [f64::INFINITY, 1.0] {
        for local in [Some(1), None] {
            let (solved, sim_x, sim_res, sim_q) = match local {
                Some(q) => {
                    let map = GradientClipMap::new(&problem, settings.eta_l, c);
                    let fp = solve_fixed_point(&map, &x0, opts)?;
                    let mut cfg = run_config(settings, q, settings.rounds_single_step);
                    cfg.policy = clip_policy(c).with_units(ThresholdUnits::Direction);
                    let x = Engine::new(&problem, cfg)?.run_to_end()?.1;
                    let res = (map.apply(&x) - &x).norm();
                    (fp, x, res / settings.eta_l, q)
                }
                None => {
                    let map = LocalMinClipMap::new(&problem, c)?;
                    let fp = solve_fixed_point(&map, &x0, opts)?;
                    let mut cfg = run_config(settings, q_big, settings.rounds_local_solve);
                    cfg.policy = clip_policy(c);
                    let x = Engine::new(&problem, cfg)?.run_to_end()?.1;
                    let res = (map.apply(&x) - &x).norm();
                    (fp, x, res, q_big)
                }
            };
            cells.push(Table1Cell {
                c,
                local_steps: local,
                solver: solved.x[0],
                solver_residual: solved.residual,
                simulation: sim_x[0],
                simulation_residual: sim_res,
                simulated_local_steps: sim_q,
            });
        }
    }
    Ok(Table1 { cells })
}

fn clip_policy(c: f64) -> ClippingPolicy {
    if c.is_finite() {
        ClippingPolicy::difference(c)
    } else {
        ClippingPolicy::none()
    }
}

fn run_config(settings: &Table1Settings, q: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::new(rounds, LocalSteps::Finite(q), 3, settings.eta_l, 1.0);
    cfg.full_participation = true;
    cfg.diagnostics = false;
    cfg.x0 = Some(vec![settings.x0]);
    cfg
}

fn fmt_q(q: Option<usize>) -> String {
    q.map_or_else(|| "inf".to_string(), |q| q.to_string())
}

/// Table-shaped CSV: one row per threshold, solver value, residual and
/// simulated value for each local-step setting.
pub fn write_table1_csv<W: Write>(table: &Table1, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["c".to_string()];
    for q in [Some(1), None] {
        let q = fmt_q(q);
        header.extend([
            format!("q{q}_solver"),
            format!("q{q}_solver_residual"),
            format!("q{q}_simulation"),
            format!("q{q}_simulation_residual"),
        ]);
    }
    w.write_record(&header).map_err(io)?;
    for c in [f64::INFINITY, 1.0] {
        let mut row = vec![if c.is_finite() { c.to_string() } else { "inf".into() }];
        for q in [Some(1), None] {
            let cell = table.cell(c, q).expect("all four cells present");
            row.extend([
                format!("{:.12}", cell.solver),
                format!("{:.3e}", cell.solver_residual),
                format!("{:.12}", cell.simulation),
                format!("{:.3e}", cell.simulation_residual),
            ]);
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
