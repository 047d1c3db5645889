use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{mean_std, read_rounds, Manifest, RunInfo, Task};
use crate::{Error, Result};

/// Paired `B − A` differences at one round, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundDelta {
    pub t: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub rounds: Vec<RoundDelta>,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_grad_norm_mean: f64,
    pub final_grad_norm_std: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Paired comparison of two completed train runs with matching seeds and `T`.
pub fn compare(a: &Path, b: &Path) -> Result<CompareReport> {
    let ma: Manifest = read_json(&a.join("manifest.json"))?;
    let mb: Manifest = read_json(&b.join("manifest.json"))?;
    if ma.task != Task::Train || mb.task != Task::Train {
        return Err(Error::InvalidConfig("compare needs two train runs".into()));
    }
    if ma.rounds != mb.rounds {
        return Err(Error::InvalidConfig(format!(
            "round counts differ: {} vs {}",
            ma.rounds, mb.rounds
        )));
    }
    if ma.seeds != mb.seeds {
        return Err(Error::InvalidConfig(format!(
            "seed lists differ: {:?} vs {:?}",
            ma.seeds, mb.seeds
        )));
    }
    let mut loss = vec![Vec::new(); ma.rounds];
    let mut grad = vec![Vec::new(); ma.rounds];
    let mut final_loss = Vec::new();
    let mut final_grad = Vec::new();
    for (ra, rb) in ma.runs.iter().zip(&mb.runs) {
        let (da, db) = (a.join(ra), b.join(rb));
        let (ta, tb) = (read_rounds(&da.join("rounds.jsonl"))?, read_rounds(&db.join("rounds.jsonl"))?);
        if ta.len() != ma.rounds || tb.len() != ma.rounds {
            return Err(Error::Io(format!("incomplete trace in {ra} or {rb}")));
        }
        for t in 0..ma.rounds {
            loss[t].push(tb[t].loss - ta[t].loss);
            grad[t].push(tb[t].global_grad_norm - ta[t].global_grad_norm);
        }
        let (ia, ib): (RunInfo, RunInfo) = (read_json(&da.join("run.json"))?, read_json(&db.join("run.json"))?);
        final_loss.push(ib.final_loss - ia.final_loss);
        final_grad.push(ib.final_grad_norm - ia.final_grad_norm);
    }
    let rounds = (0..ma.rounds)
        .map(|t| {
            let (loss_mean, loss_std) = mean_std(&loss[t]);
            let (grad_norm_mean, grad_norm_std) = mean_std(&grad[t]);
            RoundDelta {
                t,
                loss_mean,
                loss_std,
                grad_norm_mean,
                grad_norm_std,
            }
        })
        .collect();
    let (final_loss_mean, final_loss_std) = mean_std(&final_loss);
    let (final_grad_norm_mean, final_grad_norm_std) = mean_std(&final_grad);
    Ok(CompareReport {
        seeds: ma.seeds,
        rounds,
        final_loss_mean,
        final_loss_std,
        final_grad_norm_mean,
        final_grad_norm_std,
    })
}

pub fn write_compare_csv<W: Write>(report: &CompareReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rounds {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}
