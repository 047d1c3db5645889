//! Spread of local update magnitudes and their angles to the previous
//! global update, for label-balanced and label-skewed MLP federations.
//!
//! cargo run --release --example update_distribution

use fedclip::diagnostics::update_distribution;
use fedclip::engine::{Engine, LocalSteps, RunConfig};
use fedclip::problems::{build_mlp_synthetic_ensemble, MlpEnsembleSpec, NoiseMode};

fn main() -> fedclip::Result<()> {
    for (label, heterogeneity) in [("IID", 0.0), ("non-IID", 1.0)] {
        let spec = MlpEnsembleSpec {
            clients: 40,
            samples_per_client: 80,
            heterogeneity,
            seed: 5,
            ..MlpEnsembleSpec::default()
        };
        let problem = build_mlp_synthetic_ensemble(&spec)?.with_noise(NoiseMode::Minibatch { batch_size: 16 })?;
        let mut cfg = RunConfig::new(17, LocalSteps::Finite(10), 20, 0.05, 1.0);
        cfg.diagnostics = false;
        let trace = Engine::new(&problem, cfg)?.run()?;
        println!("{label}");
        for d in update_distribution(&trace).iter().filter(|d| [2, 8, 16].contains(&d.t)) {
            let angles: Vec<f64> = d.points.iter().filter_map(|p| p.angle_deg).collect();
            let mean_angle = angles.iter().sum::<f64>() / angles.len() as f64;
            println!(
                "  round {:>2}: |dx| mean {:.4} var {:.2e}  mean angle {:.1} deg",
                d.t, d.mean_magnitude, d.var_magnitude, mean_angle
            );
        }
    }
    Ok(())
}
