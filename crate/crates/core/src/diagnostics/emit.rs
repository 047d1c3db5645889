use std::io::Write;

use serde::Serialize;

use super::{BiasReport, BoundBreakdown, RoundDistribution};
use crate::{Error, Result};

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

/// One row per round: `t, intra_abs, cross_abs, intra_sq, cross_sq, alpha_bar`.
pub fn write_bias_csv<W: Write>(report: &BiasReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.rounds {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Serialize)]
struct BoundDocument<'a, I: Serialize> {
    inputs: &'a I,
    bound: &'a BoundBreakdown,
    measured: f64,
}

/// Pretty JSON with the inputs, the term breakdown and the measured left side.
pub fn write_bound_json<W: Write, I: Serialize>(
    inputs: &I,
    bound: &BoundBreakdown,
    measured: f64,
    out: W,
) -> Result<()> {
    serde_json::to_writer_pretty(out, &BoundDocument { inputs, bound, measured }).map_err(io_err)
}

#[derive(Serialize)]
struct ScatterRow {
    magnitude: f64,
    angle_deg: Option<f64>,
}

/// `magnitude, angle_deg` rows of one round; undefined angles are empty cells.
pub fn write_scatter_csv<W: Write>(round: &RoundDistribution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in &round.points {
        w.serialize(ScatterRow {
            magnitude: p.magnitude,
            angle_deg: p.angle_deg,
        })
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{RoundBias, UpdatePoint};

    #[test]
    fn bias_csv_header_is_stable() {
        let report = BiasReport {
            rounds: vec![RoundBias {
                t: 0,
                intra_abs: 0.0,
                cross_abs: 0.25,
                intra_sq: 0.0,
                cross_sq: 0.0625,
                alpha_bar: 0.5,
            }],
            gamma1: 0.5,
            gamma2: 0.25,
        };
        let mut buf = Vec::new();
        write_bias_csv(&report, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,intra_abs,cross_abs,intra_sq,cross_sq,alpha_bar\n0,0.0,0.25,0.0,0.0625,0.5\n"
        );
    }

    #[test]
    fn scatter_csv_leaves_missing_angles_empty() {
        let round = RoundDistribution {
            t: 0,
            points: vec![
                UpdatePoint { magnitude: 1.5, angle_deg: None },
                UpdatePoint { magnitude: 2.0, angle_deg: Some(90.0) },
            ],
            mean_magnitude: 1.75,
            var_magnitude: 0.0625,
        };
        let mut buf = Vec::new();
        write_scatter_csv(&round, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "magnitude,angle_deg\n1.5,\n2.0,90.0\n");
    }
}
