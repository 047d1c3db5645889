//! Term-by-term convergence bound next to the measured weighted gradient
//! norm, plus the local-drift check, for difference-clipped FedAvg.
//!
//! cargo run --example convergence_bound

use fedclip::clipping::ClippingPolicy;
use fedclip::diagnostics::{
    clip_bias_terms, corollary1_bound, drift_check, measured_weighted_grad_norm, theorem1_bound, BoundInputs,
    CorollaryInputs,
};
use fedclip::engine::{Engine, LocalSteps, RunConfig};
use fedclip::problems::slope_ensemble;

fn main() -> fedclip::Result<()> {
    let problem = slope_ensemble();
    let l = problem.constants().lipschitz.value;
    let q = 4;
    let eta_l = 0.5 / (60f64.sqrt() * q as f64 * l);
    let mut cfg = RunConfig::new(400, LocalSteps::Finite(q), 3, eta_l, 1.0);
    cfg.full_participation = true;
    cfg.x0 = Some(vec![3.0]);

    for c in [f64::INFINITY, 0.05, 0.01] {
        cfg.policy = if c.is_finite() { ClippingPolicy::difference(c) } else { ClippingPolicy::none() };
        let trace = Engine::new(&problem, cfg.clone())?.run()?;
        let report = clip_bias_terms(&trace)?;
        let inputs = BoundInputs::from_run(&problem, &cfg, &trace, &report, 0.0)?;
        let b = theorem1_bound(&inputs)?;
        let drift = drift_check(&trace, &problem, &cfg)?;
        println!("c = {c}");
        println!("  gamma1 {:.4}  gamma2 {:.4}", report.gamma1, report.gamma2);
        println!(
            "  gap {:.3e}  drift {:.3e}  sampling {:.3e}  noise {:.3e}  bias {:.3e} + {:.3e}",
            b.initial_gap, b.drift, b.sampling_variance, b.privacy_noise, b.clipping_bias_abs, b.clipping_bias_sq
        );
        println!(
            "  bound {:.4e}  measured {:.4e}  certified {}  drift lemma holds {}",
            b.total,
            measured_weighted_grad_norm(&trace),
            b.certified,
            drift.all_pass
        );
    }

    let c = corollary1_bound(&CorollaryInputs {
        eta_g: 1.0,
        eta_l: 0.01,
        local_steps: 32,
        rounds: 100,
        sampled: 80,
        clients: 1920,
        dimension: 10_000,
        epsilon: 1.5,
        delta: 1e-5,
        v: 2.0,
        c_prime: 1.0,
        f_gap: 1.0,
        lipschitz: 1.0,
        sigma_l: 1.0,
        sigma_g: 1.0,
    });
    println!("private bound {:.4e} (noise {:.4e}), reference scale {:.4e}", c.total, c.privacy_noise, c.reference_scale);
    Ok(())
}
