use d2r_core::data::{make_blobs, make_two_moons};
use d2r_core::losses::cross_entropy;
use d2r_core::optim::SgdMomentum;
use d2r_core::train::train;
use d2r_core::{
    AttackConfig, Dataset, EvalAttack, Generator, LossWeights, ModelSpec, ModelState, Objective, Role, Tape, Tensor,
    TrainConfig, Trainer,
};

fn blobs() -> Dataset {
    make_blobs(64, &[vec![0.2, 0.2], vec![0.8, 0.8]], 0.05, 3).unwrap()
}

fn small_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(epochs);
    cfg.batch_size = 16;
    cfg.lr = 0.01;
    cfg.attack = AttackConfig {
        epsilon: 0.05,
        eta: 0.01,
        iterations: 3,
        ..Default::default()
    };
    cfg.monitor = EvalAttack::pgd20(0.05, 0.01);
    cfg
}

fn pair(seed: u64) -> (ModelState, ModelState) {
    let g = ModelState::init(&ModelSpec::new(vec![2, 8, 2], seed).unwrap(), Role::Guide).unwrap();
    let t = ModelState::init(&ModelSpec::new(vec![2, 16, 16, 2], seed + 1).unwrap(), Role::Target).unwrap();
    (g, t)
}

#[test]
fn zero_learning_rate_freezes_both_models() {
    let ds = blobs();
    let (g, t) = pair(0);
    let mut trainer = Trainer::new(g.clone(), t.clone(), small_config(1)).unwrap();
    let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    for step in 0..3 {
        let b = trainer.step(&x, &y, 0.0, step).unwrap();
        assert!(b.total.is_finite());
    }
    assert_eq!(trainer.guide(), &g);
    assert_eq!(trainer.target(), &t);
}

#[test]
fn one_step_moves_both_models() {
    let ds = blobs();
    let (g, t) = pair(0);
    let mut trainer = Trainer::new(g.clone(), t.clone(), small_config(1)).unwrap();
    let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    trainer.step(&x, &y, 0.01, 0).unwrap();
    assert_ne!(trainer.guide(), &g);
    assert_ne!(trainer.target(), &t);
}

#[test]
fn pgd_at_baseline_leaves_the_guide_alone() {
    let ds = blobs();
    let (g, t) = pair(0);
    let mut cfg = small_config(1);
    cfg.objective = Objective::PgdAt;
    cfg.generator = Generator::Pgd;
    let mut trainer = Trainer::new(g.clone(), t.clone(), cfg).unwrap();
    let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let b = trainer.step(&x, &y, 0.01, 0).unwrap();
    assert_eq!(b.total, b.ce);
    assert_eq!(trainer.guide(), &g);
    assert_ne!(trainer.target(), &t);
}

#[test]
fn without_regularizers_the_step_is_ce_plus_mse() {
    let ds = blobs();
    let (g, t) = pair(2);
    let mut cfg = small_config(1);
    cfg.weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
    cfg.generator = Generator::Pgd;
    let mut trainer = Trainer::new(g, t, cfg).unwrap();
    let (x, y) = ds.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let b = trainer.step(&x, &y, 0.01, 0).unwrap();
    assert_eq!(b.total, b.ce + b.mse);
}

#[test]
fn loss_decreases_on_separable_blobs() {
    let ds = blobs();
    let (g, t) = pair(4);
    let mut trainer = Trainer::new(g, t, small_config(1)).unwrap();
    let batches = d2r_core::BatchIterator::new(ds.len(), 16, 9).unwrap();
    let mut losses = Vec::new();
    for epoch in 0.. {
        for idx in batches.batches(epoch) {
            let (x, y) = ds.batch(&idx).unwrap();
            losses.push(trainer.step(&x, &y, 0.01, losses.len() as u64).unwrap().total);
        }
        if losses.len() >= 50 {
            break;
        }
    }
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "moving average went from {head} to {tail}");
}

#[test]
fn one_layer_model_separates_distant_blobs() {
    let ds = make_blobs(40, &[vec![0.1, 0.1, 0.1], vec![0.9, 0.9, 0.9]], 0.05, 1).unwrap();
    let mut m = ModelState::init(&ModelSpec::new(vec![3, 2], 6).unwrap(), Role::Target).unwrap();
    let mut opt = SgdMomentum::new(m.parameters(), 0.9).unwrap();
    let mut reached = None;
    for step in 0..100 {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let x = tape.constant(ds.features().clone());
        let logits = bound.forward(&mut tape, x).unwrap();
        let loss = cross_entropy(&mut tape, logits, ds.labels()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g: Vec<&Tensor> = bound.params().iter().map(|&v| grads.get(v).unwrap()).collect();
        opt.step(m.parameters_mut(), &g, 0.1).unwrap();
        let acc = d2r_core::evaluate(&m, &ds, &EvalAttack::Clean).unwrap();
        if acc == 1.0 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some());
}

#[test]
fn zero_epochs_returns_initial_states() {
    let ds = blobs();
    let gs = ModelSpec::new(vec![2, 8, 2], 0).unwrap();
    let ts = ModelSpec::new(vec![2, 16, 16, 2], 1).unwrap();
    let out = train(&gs, &ts, &ds, &small_config(0)).unwrap();
    assert!(out.records.is_empty());
    assert!(out.best.is_none());
    assert_eq!(out.guide, ModelState::init(&gs, Role::Guide).unwrap());
    assert_eq!(out.target, ModelState::init(&ts, Role::Target).unwrap());
}

#[test]
fn runs_are_reproducible() {
    let ds = make_two_moons(96, 0.1, 2).unwrap().split_holdout(0.25, 2).unwrap();
    let gs = ModelSpec::new(vec![2, 8, 2], 0).unwrap();
    let ts = ModelSpec::new(vec![2, 16, 16, 2], 1).unwrap();
    let cfg = small_config(3);
    let a = train(&gs, &ts, &ds, &cfg).unwrap();
    let b = train(&gs, &ts, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 3);
    for r in &a.records {
        for v in [
            r.gap_sign_positive_fraction,
            r.gap_sign_negative_fraction,
            r.guide.clean,
            r.guide.robust,
            r.target.clean,
            r.target.robust,
        ] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r.steps, 72 / 16 + 1);
    }
    let best = a.best.unwrap();
    let top = a.records.iter().map(|r| r.target.robust).fold(0.0, f64::max);
    assert_eq!(best.robust_accuracy, top);

    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train(&gs, &ts, &ds, &other).unwrap().records, a.records);
}

#[test]
fn dimension_mismatch_is_rejected() {
    let ds = blobs();
    let gs = ModelSpec::new(vec![3, 8, 2], 0).unwrap();
    let ts = ModelSpec::new(vec![2, 16, 2], 1).unwrap();
    assert!(train(&gs, &ts, &ds, &small_config(1)).is_err());
    let gs = ModelSpec::new(vec![2, 8, 3], 0).unwrap();
    assert!(train(&gs, &ts, &ds, &small_config(1)).is_err());
}

#[test]
fn oversized_batch_is_rejected() {
    let ds = blobs();
    let gs = ModelSpec::new(vec![2, 8, 2], 0).unwrap();
    let ts = ModelSpec::new(vec![2, 16, 2], 1).unwrap();
    let mut cfg = small_config(1);
    cfg.batch_size = 65;
    assert!(train(&gs, &ts, &ds, &cfg).is_err());
}
