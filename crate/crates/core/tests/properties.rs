//! Properties of the public API that span several modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sphereflow::density::{
    ess_from_log_weights, log_density_at, mixture_log_density, sample_model, TargetSpec, VmfMixture,
};
use sphereflow::diagnostics::random_net;
use sphereflow::flow::{
    backprop_discretize, integrate_backward_adjoint, integrate_cotangent_lift, integrate_forward,
    IntegratorConfig,
};
use sphereflow::trainer::{TrainConfig, Trainer};
use sphereflow::vector_field::{eval_field, CotangentState};
use sphereflow::{Manifold, ManifoldPoint, Sphere};

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn joint(g: &sphereflow::flow::BackwardResult) -> Vec<f64> {
    g.param_grad.as_slice().iter().chain(&g.grad_q0).copied().collect()
}

#[test]
fn adjoint_discretize_gap_shrinks_with_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [2, 3] {
        let m = n + 1;
        let net = random_net(&[m + 1, 10, 10, m], 1.0, &mut rng).unwrap();
        let q0 = Sphere::new(n).unwrap().sample_base(&mut rng, 1).pop().unwrap();
        let c: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gap = |steps: usize| {
            let cfg = IntegratorConfig::with_steps(steps);
            let fwd = integrate_forward(&net, &q0, &cfg).unwrap();
            let adj = integrate_backward_adjoint(&net, &fwd.q1, &c, 0.7, &cfg).unwrap();
            let dis = backprop_discretize(&net, &q0, &cfg, &c, 0.7).unwrap();
            rel(&joint(&adj), &joint(&dis))
        };
        let (coarse, fine) = (gap(100), gap(400));
        assert!(coarse < 1e-4, "S^{n}: {coarse}");
        assert!(fine < coarse / 10.0, "S^{n}: {coarse} -> {fine}");
    }
}

#[test]
fn hamiltonian_drift_is_fourth_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4a);
    let mut net = random_net(&[4, 10, 10, 3], 1.0, &mut rng).unwrap();
    net.zero_time_input();
    let q = Sphere::new(2).unwrap().sample_base(&mut rng, 1).pop().unwrap();
    let start = CotangentState {
        q,
        p: vec![0.6, -0.9, 0.3],
    };
    let ham = |s: &CotangentState| -> f64 {
        let x = eval_field(&net, 0.0, &s.q).unwrap().vec;
        s.p.iter().zip(&x).map(|(a, b)| a * b).sum()
    };
    let h0 = ham(&start);
    let drift = |steps: usize| {
        let cfg = IntegratorConfig {
            steps,
            record_trajectory: true,
            ..IntegratorConfig::default()
        };
        integrate_cotangent_lift(&net, &start, &cfg)
            .unwrap()
            .iter()
            .map(|(_, s)| (ham(s) - h0).abs())
            .fold(0.0, f64::max)
    };
    let (d100, d200) = (drift(100), drift(200));
    let ratio = d100 / d200;
    assert!((12.0..20.0).contains(&ratio), "{d100:e} / {d200:e} = {ratio}");
}

#[test]
fn target_file_round_trip_preserves_density() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("target.toml");
    for n in [2, 3] {
        let mix = VmfMixture::benchmark(n).unwrap();
        mix.to_spec().save(&path).unwrap();
        let back = TargetSpec::load(&path).unwrap().to_mixture().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        for x in Sphere::new(n).unwrap().sample_base(&mut rng, 50) {
            let (a, b) = (
                mixture_log_density(&mix, &x).unwrap(),
                mixture_log_density(&back, &x).unwrap(),
            );
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn shipped_configs_describe_the_benchmarks() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for n in [2, 3] {
        let cfg = TrainConfig::load(&root.join(format!("s{n}.toml"))).unwrap();
        assert_eq!(
            cfg,
            TrainConfig {
                n,
                epochs: 3000,
                target: cfg.target.clone(),
                ..TrainConfig::default()
            }
        );
        let shipped = cfg.load_target().unwrap();
        let builtin = VmfMixture::benchmark(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for x in Sphere::new(n).unwrap().sample_base(&mut rng, 50) {
            let (a, b) = (
                mixture_log_density(&shipped, &x).unwrap(),
                mixture_log_density(&builtin, &x).unwrap(),
            );
            assert!((a - b).abs() < 1e-12, "S^{n}: {a} vs {b}");
        }
    }
}

#[test]
fn sampled_log_density_matches_reverse_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(&[5, 10, 10, 4], 0.8, &mut rng).unwrap();
    let s3 = Sphere::new(3).unwrap();
    let cfg = IntegratorConfig::default();
    for s in sample_model(&net, &s3, &cfg, 20, 9).unwrap() {
        let back = log_density_at(&net, &s3, &s.x, &cfg).unwrap();
        assert!((back - s.log_q).abs() < 2e-6, "{back} vs {}", s.log_q);
    }
}

/// Median loss over late epochs is below the median over early epochs.
/// Takes three full-length training runs; run with `--ignored`.
#[test]
#[ignore]
fn training_loss_trends_down() {
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    for seed in 0..3 {
        let cfg = TrainConfig {
            epochs: 3000,
            checkpoint_interval: 3000,
            eval_samples: 1000,
            seed,
            ..TrainConfig::default()
        };
        let losses: Vec<f64> = Trainer::new(cfg)
            .unwrap()
            .run(|_, _| Ok(()))
            .unwrap()
            .iter()
            .map(|r| r.loss)
            .collect();
        let (early, late) = (median(&losses[..1000]), median(&losses[2000..]));
        assert!(late < early, "seed {seed}: {early} -> {late}");
    }
}

fn point(v: Vec<f64>) -> Option<ManifoldPoint> {
    ManifoldPoint::normalized(v).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_then_backward_returns_home(
        seed in 0u64..1000,
        v in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let Some(q0) = point(v) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(&[4, 10, 10, 3], 1.0, &mut rng).unwrap();
        let cfg = IntegratorConfig::default();
        let fwd = integrate_forward(&net, &q0, &cfg).unwrap();
        let back = integrate_forward(&net, &fwd.q1, &cfg.reversed()).unwrap();
        prop_assert!(Sphere::geodesic_distance(back.q1.coords(), q0.coords()) < 1e-6);
        prop_assert!((fwd.delta_log_density + back.delta_log_density).abs() < 1e-5);
    }

    #[test]
    fn ess_is_at_most_full(log_w in prop::collection::vec(-30.0f64..30.0, 1..60)) {
        let ess = ess_from_log_weights(&log_w).unwrap();
        prop_assert!(ess > 0.0 && ess <= 100.0 + 1e-9);
        let lo = log_w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > 1e-3 {
            prop_assert!(ess < 100.0);
        }
    }

    #[test]
    fn equal_weights_give_full_ess(w in -50.0f64..50.0, len in 1usize..100) {
        let ess = ess_from_log_weights(&vec![w; len]).unwrap();
        prop_assert!((ess - 100.0).abs() < 1e-9);
    }
}
