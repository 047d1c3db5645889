use serde::{Deserialize, Serialize};

use crate::engine::RoundRecord;

/// One participant's update: magnitude `‖Δx_i^t‖` and its angle in degrees to
/// the previous round's mean transmitted update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdatePoint {
    pub magnitude: f64,
    pub angle_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDistribution {
    pub t: usize,
    pub points: Vec<UpdatePoint>,
    pub mean_magnitude: f64,
    /// Population variance of the magnitudes.
    pub var_magnitude: f64,
}

pub fn update_distribution(trace: &[RoundRecord]) -> Vec<RoundDistribution> {
    trace
        .iter()
        .map(|rec| {
            let points: Vec<UpdatePoint> = rec
                .clients
                .iter()
                .map(|c| UpdatePoint {
                    magnitude: c.delta_norm,
                    angle_deg: c.angle_deg,
                })
                .collect();
            let n = points.len().max(1) as f64;
            let mean = points.iter().map(|p| p.magnitude).sum::<f64>() / n;
            let var = points.iter().map(|p| (p.magnitude - mean).powi(2)).sum::<f64>() / n;
            RoundDistribution {
                t: rec.t,
                points,
                mean_magnitude: mean,
                var_magnitude: var,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Engine, LocalSteps, RunConfig};
    use crate::problems::slope_ensemble;

    #[test]
    fn first_round_has_no_angles() {
        let p = slope_ensemble();
        let mut cfg = RunConfig::new(4, LocalSteps::Finite(2), 3, 0.01, 1.0);
        cfg.x0 = Some(vec![2.0]);
        let dist = update_distribution(&Engine::new(&p, cfg).unwrap().run().unwrap());
        assert_eq!(dist.len(), 4);
        assert!(dist[0].points.iter().all(|p| p.angle_deg.is_none()));
        assert!(dist[1..]
            .iter()
            .flat_map(|d| &d.points)
            .all(|p| matches!(p.angle_deg, Some(a) if (0.0..=180.0).contains(&a))));
        for d in &dist {
            assert!(d.var_magnitude >= 0.0);
            assert_eq!(d.points.len(), 3);
        }
    }
}
