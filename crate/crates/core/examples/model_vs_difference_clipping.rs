//! Clipping the transmitted model versus clipping the update.
//!
//! Three clients `½(x − b_i)²` with `b = (−0.5, −0.5, 5)` have optimum 4/3.
//! With model clipping at `c = 1` FedAvg settles at `λc/(3 − 2λ)` where
//! `λ = (1 − η_l)^Q`. Difference clipping at the same threshold is still
//! biased but lands closer to the optimum.
//!
//! cargo run --example model_vs_difference_clipping

use fedclip::clipping::ClippingPolicy;
use fedclip::engine::{Engine, LocalSteps, RunConfig};
use fedclip::fixedpoint::{model_clip_closed_form, model_contraction};
use fedclip::problems::build_quadratic_ensemble;

fn main() -> fedclip::Result<()> {
    let problem = build_quadratic_ensemble(&[-0.5, -0.5, 5.0])?;
    let x_star = problem.global_optimum().expect("quadratic")[0];
    println!("optimum x* = {x_star:.6}");
    println!("{:>6} {:>3} {:>8} {:>12} {:>12} {:>12}", "eta_l", "Q", "lambda", "model-clip", "closed form", "diff-clip");
    for (eta_l, q) in [(0.5, 1), (0.5, 2), (0.2, 4), (0.1, 10)] {
        let mut cfg = RunConfig::new(2000, LocalSteps::Finite(q), 3, eta_l, 1.0);
        cfg.full_participation = true;
        cfg.diagnostics = false;
        cfg.x0 = Some(vec![0.0]);
        cfg.policy = ClippingPolicy::model(1.0);
        let model = Engine::new(&problem, cfg.clone())?.run_to_end()?.1[0];
        cfg.policy = ClippingPolicy::difference(1.0);
        let diff = Engine::new(&problem, cfg)?.run_to_end()?.1[0];
        let lambda = model_contraction(eta_l, q)?;
        println!(
            "{eta_l:>6} {q:>3} {lambda:>8.4} {model:>12.6} {:>12.6} {diff:>12.6}",
            model_clip_closed_form(lambda, 1.0)
        );
    }
    Ok(())
}
