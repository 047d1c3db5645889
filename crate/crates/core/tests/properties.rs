use fedclip::clipping::ClippingPolicy;
use fedclip::diagnostics::{clip_bias_terms, drift_check};
use fedclip::engine::{local_update, run_experiment, Engine, LocalSteps, RunConfig};
use fedclip::fixedpoint::{lambda_map_matrix, solve_fixed_point, GradientClipMap, LocalMinClipMap, OneRoundMap, SolveOptions};
use fedclip::privacy::PrivacyConfig;
use fedclip::problems::{build_linear_regression_ensemble, NoiseMode, ProblemInstance};
use fedclip::rng::{Purpose, StreamKey};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn ensemble(n: usize, d: usize, entries: &[f64]) -> ProblemInstance {
    let rows = d + 1;
    let mut it = entries.iter().cycle();
    let a = (0..n)
        .map(|_| DMatrix::from_fn(rows, d, |_, _| *it.next().unwrap()))
        .collect::<Vec<_>>();
    let b = (0..n)
        .map(|_| DVector::from_fn(rows, |_, _| 2.0 * it.next().unwrap()))
        .collect::<Vec<_>>();
    build_linear_regression_ensemble(a, b).unwrap()
}

fn max_eigen(p: &ProblemInstance) -> f64 {
    p.clients()
        .iter()
        .map(|f| f.gram().unwrap().symmetric_eigenvalues().max())
        .fold(0.0, f64::max)
}

fn well_conditioned(p: &ProblemInstance) -> bool {
    p.clients().iter().all(|f| {
        let e = f.gram().unwrap().symmetric_eigenvalues();
        e.min() > 1e-3 * e.max()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_phase_is_preconditioned_step(
        n in 1usize..4,
        d in 1usize..4,
        entries in prop::collection::vec(-1.5f64..1.5, 24),
        x in prop::collection::vec(-2.0f64..2.0, 3),
        frac in 0.05f64..1.8,
        q in 1usize..12,
    ) {
        let p = ensemble(n, d, &entries);
        prop_assume!(well_conditioned(&p));
        let eta = frac / max_eigen(&p);
        let x = DVector::from_column_slice(&x[..d]);
        for i in 0..n {
            let f = p.client(i);
            let lam = lambda_map_matrix(&f.gram().unwrap(), eta, Some(q)).unwrap();
            let mut oracle = p.oracle(i, StreamKey::new(0, Purpose::LocalGradient).rng());
            let local = local_update(&mut oracle, &x, LocalSteps::Finite(q), eta, false).unwrap();
            let lhs = -&local.grad_sum * eta;
            let rhs = -(lam * f.gradient(&x));
            prop_assert!((&lhs - &rhs).norm() <= 1e-10 * rhs.norm().max(1.0));
            prop_assert!((&local.x_final - &x - lhs).norm() <= 1e-12 * x.norm().max(1.0));
        }
    }

    #[test]
    fn gammas_are_ordered(
        n in 2usize..5,
        entries in prop::collection::vec(-1.5f64..1.5, 24),
        c in 0.001f64..0.5,
        q in 1usize..6,
        sampled in 1usize..3,
        seed in 0u64..1000,
    ) {
        let p = ensemble(n, 2, &entries);
        prop_assume!(well_conditioned(&p));
        let mut cfg = RunConfig::new(8, LocalSteps::Finite(q), sampled.min(n), 0.5 / max_eigen(&p), 1.0);
        cfg.policy = ClippingPolicy::difference(c);
        cfg.seed = seed;
        cfg.x0 = Some(vec![1.0, -1.0]);
        let r = clip_bias_terms(&Engine::new(&p, cfg).unwrap().run().unwrap()).unwrap();
        prop_assert!(r.gamma2 > 0.0 && r.gamma2 <= r.gamma1 && r.gamma1 <= 1.0);
        for b in &r.rounds {
            prop_assert!((0.0..1.0).contains(&b.intra_abs) && (0.0..1.0).contains(&b.cross_abs));
        }
    }

    #[test]
    fn drift_lemma_holds_in_regime(
        n in 2usize..6,
        d in 1usize..4,
        entries in prop::collection::vec(-1.5f64..1.5, 24),
        q in 1usize..8,
        frac in 0.1f64..1.0,
        seed in 0u64..1000,
    ) {
        let p = ensemble(n, d, &entries);
        let l = p.constants().lipschitz.value;
        let eta = frac / (60f64.sqrt() * q as f64 * l);
        let mut cfg = RunConfig::new(20, LocalSteps::Finite(q), n, eta, 1.0);
        cfg.seed = seed;
        cfg.x0 = Some(vec![0.0; d]);
        let trace = Engine::new(&p, cfg.clone()).unwrap().run().unwrap();
        let r = drift_check(&trace, &p, &cfg).unwrap();
        prop_assert!(r.all_pass);
    }

    #[test]
    fn fixed_points_meet_tolerance(
        b in prop::collection::vec(-3.0f64..3.0, 2..5),
        a in prop::collection::vec(0.5f64..3.0, 4),
        c in 0.1f64..2.0,
    ) {
        let n = b.len();
        let p = build_linear_regression_ensemble(
            (0..n).map(|i| DMatrix::from_element(1, 1, a[i])).collect(),
            b.iter().map(|&v| DVector::from_element(1, v)).collect(),
        ).unwrap();
        let opts = SolveOptions::default();
        let x0 = DVector::from_element(1, 0.0);
        let step = 1.0 / max_eigen(&p);
        let maps: [Box<dyn OneRoundMap>; 2] = [
            Box::new(GradientClipMap::new(&p, step, c)),
            Box::new(LocalMinClipMap::new(&p, c).unwrap()),
        ];
        for map in &maps {
            let fp = solve_fixed_point(map.as_ref(), &x0, opts).unwrap();
            prop_assert!(fp.residual <= opts.tol);
            prop_assert!((map.apply(&fp.x) - &fp.x).norm() <= opts.tol);
        }
    }
}

#[test]
fn records_do_not_depend_on_thread_count() {
    let p = ensemble(6, 2, &[0.3, -1.2, 0.8, 1.1, -0.4, 0.9, 0.2])
        .with_noise(NoiseMode::Gaussian { sigma_l: 0.4 })
        .unwrap();
    let mut cfg = RunConfig::new(12, LocalSteps::Finite(3), 4, 0.05, 1.0);
    cfg.policy = ClippingPolicy::difference(0.05);
    cfg.privacy = PrivacyConfig::new(3.0, 1e-5);
    cfg.expectation_replays = 6;
    cfg.seed = 99;
    cfg.x0 = Some(vec![1.0, 1.0]);
    let one = run_experiment(&p, &cfg, Some(1)).unwrap();
    let many = run_experiment(&p, &cfg, Some(8)).unwrap();
    assert_eq!(one.records, many.records);
    assert_eq!(one.final_x, many.final_x);
}
