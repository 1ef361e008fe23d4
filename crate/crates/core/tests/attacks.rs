use d2r_core::attacks::{
    cag_gen, cag_trace, fgsm, generate, kl_to_reference, pgd, pgd_trace, project_linf, trades_gen, trades_trace,
};
use d2r_core::losses::cross_entropy;
use d2r_core::model::Layer;
use d2r_core::{AttackConfig, Generator, InitMode, InputBounds, ModelSpec, ModelState, Role, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(widths: &[usize], seed: u64, role: Role) -> ModelState {
    ModelState::init(&ModelSpec::new(widths.to_vec(), seed).unwrap(), role).unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize, classes: usize) -> (Tensor, Vec<usize>) {
    let data = (0..rows * cols).map(|_| rng.random_range(0.0..=1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(vec![rows, cols], data).unwrap(), labels)
}

fn assert_invariants(x: &Tensor, x_adv: &Tensor, eps: f64) {
    for (&c, &a) in x.data().iter().zip(x_adv.data()) {
        assert!((a - c).abs() <= eps + 1e-9, "left the ball: {c} -> {a}");
        assert!((0.0..=1.0).contains(&a), "left the bounds: {a}");
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn every_iterate_of_every_generator_stays_feasible() {
    let guide = model(&[4, 8, 3], 1, Role::Guide);
    let target = model(&[4, 16, 16, 3], 2, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..40 {
        let (x, y) = random_batch(&mut rng, 6, 4, 3);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.03,
            iterations: 5,
            seed: trial,
            ..Default::default()
        };
        for iterate in pgd_trace(&target, &x, &y, &cfg)
            .unwrap()
            .iter()
            .chain(&trades_trace(&target, &x, &cfg).unwrap())
            .chain(&cag_trace(&guide, &target, &x, &cfg).unwrap())
        {
            assert_invariants(&x, iterate, cfg.epsilon);
        }
        assert_invariants(&x, &fgsm(&target, &x, &y, &cfg).unwrap().x_adv, cfg.epsilon);
    }
}

#[test]
fn fgsm_equals_single_zero_init_pgd_step() {
    let target = model(&[3, 10, 2], 5, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (x, y) = random_batch(&mut rng, 8, 3, 2);
        let cfg = AttackConfig {
            epsilon: 0.05,
            eta: 0.05,
            iterations: 1,
            init: InitMode::Zero,
            ..Default::default()
        };
        let a = fgsm(&target, &x, &y, &cfg).unwrap();
        let b = pgd(&target, &x, &y, &cfg).unwrap();
        assert_eq!(bits(&a.x_adv), bits(&b.x_adv));
    }
}

#[test]
fn fgsm_on_linear_model_moves_by_epsilon_times_known_sign() {
    // logits = x W; for label 0 the input gradient is p1 (W[:,1] - W[:,0])
    let spec = ModelSpec::new(vec![3, 2], 0).unwrap();
    let layer = Layer {
        weight: Tensor::from_rows(&[[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]]).unwrap(),
        bias: Tensor::zeros(&[2]),
    };
    let m = ModelState::from_layers(spec, Role::Target, vec![layer]).unwrap();
    let x = Tensor::from_rows(&[[0.5, 0.5, 0.5]]).unwrap();
    let eps = 0.03125;
    let cfg = AttackConfig {
        epsilon: eps,
        eta: eps,
        ..Default::default()
    };
    let adv = fgsm(&m, &x, &[0], &cfg).unwrap();
    let delta: Vec<f64> = adv.x_adv.data().iter().zip(x.data()).map(|(a, c)| a - c).collect();
    assert_eq!(delta, vec![eps, -eps, eps]);
    let adv = fgsm(&m, &x, &[1], &cfg).unwrap();
    let delta: Vec<f64> = adv.x_adv.data().iter().zip(x.data()).map(|(a, c)| a - c).collect();
    assert_eq!(delta, vec![-eps, eps, -eps]);
}

#[test]
fn cag_with_identical_models_is_trades() {
    let m = model(&[2, 12, 3], 3, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for init in [InitMode::Zero, InitMode::UniformBall] {
        let (x, _) = random_batch(&mut rng, 10, 2, 3);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.02,
            iterations: 10,
            init,
            seed: 77,
            ..Default::default()
        };
        let t = trades_gen(&m, &x, &cfg).unwrap();
        let c = cag_gen(&m, &m, &x, &cfg).unwrap();
        assert_eq!(bits(&t.x_adv), bits(&c.x_adv));
    }
}

#[test]
fn trades_from_zero_init_stays_put() {
    let m = model(&[2, 12, 3], 3, Role::Target);
    let x = Tensor::from_rows(&[[0.3, 0.6], [0.9, 0.1]]).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.1,
        eta: 0.02,
        iterations: 5,
        init: InitMode::Zero,
        ..Default::default()
    };
    assert_eq!(trades_gen(&m, &x, &cfg).unwrap().x_adv, x);
}

#[test]
fn pgd_loss_is_monotone_on_logistic_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..20 {
        let m = model(&[5, 3], seed, Role::Target);
        let (x, y) = random_batch(&mut rng, 16, 5, 3);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.01,
            iterations: 15,
            seed,
            ..Default::default()
        };
        let losses: Vec<f64> = pgd_trace(&m, &x, &y, &cfg)
            .unwrap()
            .iter()
            .map(|xi| {
                let mut t = Tape::new();
                let logits = t.constant(m.predict(xi).unwrap());
                let ce = cross_entropy(&mut t, logits, &y).unwrap();
                t.value(ce).data()[0]
            })
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{losses:?}");
        }
    }
}

#[test]
fn trades_kl_ascends() {
    let m = model(&[2, 16, 3], 8, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ascended = 0;
    for seed in 0..50 {
        let (x, _) = random_batch(&mut rng, 8, 2, 3);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.02,
            iterations: 10,
            seed,
            ..Default::default()
        };
        let reference = m.predict(&x).unwrap();
        let trace = trades_trace(&m, &x, &cfg).unwrap();
        let first = kl_to_reference(&m, &trace[1], &reference).unwrap();
        let last = kl_to_reference(&m, trace.last().unwrap(), &reference).unwrap();
        ascended += usize::from(last >= first);
    }
    assert!(ascended >= 45, "{ascended}/50");
}

#[test]
fn cag_kl_ascends() {
    let guide = model(&[2, 8, 2], 10, Role::Guide);
    let target = model(&[2, 32, 32, 2], 11, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ascended = 0;
    for seed in 0..100 {
        let (x, _) = random_batch(&mut rng, 8, 2, 2);
        let cfg = AttackConfig {
            epsilon: 0.1,
            eta: 0.02,
            iterations: 10,
            seed,
            ..Default::default()
        };
        let reference = guide.predict(&x).unwrap();
        let trace = cag_trace(&guide, &target, &x, &cfg).unwrap();
        let initial = kl_to_reference(&target, &trace[0], &reference).unwrap();
        let last = kl_to_reference(&target, trace.last().unwrap(), &reference).unwrap();
        ascended += usize::from(last >= initial);
    }
    assert!(ascended >= 90, "{ascended}/100");
}

#[test]
fn generators_are_deterministic() {
    let guide = model(&[3, 8, 2], 1, Role::Guide);
    let target = model(&[3, 8, 8, 2], 2, Role::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = random_batch(&mut rng, 5, 3, 2);
    let cfg = AttackConfig {
        epsilon: 0.1,
        eta: 0.02,
        seed: 3,
        ..Default::default()
    };
    for g in Generator::ALL {
        let a = generate(g, Some(&guide), &target, &x, &y, &cfg).unwrap();
        let b = generate(g, Some(&guide), &target, &x, &y, &cfg).unwrap();
        assert_eq!(bits(&a.x_adv), bits(&b.x_adv));
        assert_eq!(a.generator, g);
        assert!(a.linf_distance() <= cfg.epsilon + 1e-9);
    }
    // a different seed moves the random start
    let one = AttackConfig { iterations: 1, ..cfg };
    let c = pgd(&target, &x, &y, &one.with_seed(4)).unwrap();
    assert_ne!(bits(&c.x_adv), bits(&pgd(&target, &x, &y, &one).unwrap().x_adv));
}

#[test]
fn projection_respects_custom_bounds() {
    let clean = Tensor::vector(vec![0.0, 0.5, 1.0]).unwrap();
    let adv = Tensor::vector(vec![-1.0, 0.9, 2.0]).unwrap();
    let out = project_linf(&adv, &clean, 0.2, InputBounds { low: -0.1, high: 1.05 }).unwrap();
    assert_eq!(out.data(), &[-0.1, 0.7, 1.05]);
}

#[test]
fn attacks_reject_wrong_width() {
    let m = model(&[3, 2], 0, Role::Target);
    let x = Tensor::zeros(&[2, 4]);
    let cfg = AttackConfig::default();
    assert!(pgd(&m, &x, &[0, 1], &cfg).is_err());
    assert!(trades_gen(&m, &x, &cfg).is_err());
    assert!(fgsm(&m, &x, &[0, 1], &cfg).is_err());
}
