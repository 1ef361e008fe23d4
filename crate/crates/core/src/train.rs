//! Joint guide/target adversarial training.
//!
//! Each step regenerates adversarial examples from the current models, runs
//! the guide on the clean batch and the target on both the clean and the
//! adversarial batch, and applies one momentum-SGD update to both models
//! from the gradient of the composed loss.

use alloc::format;
use alloc::vec::Vec;

use crate::attacks::{generate, AttackConfig, Generator};
use crate::autodiff::Tape;
use crate::data::{BatchIterator, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalAttack};
use crate::losses::{cross_entropy, d2r_loss, GapSign, LossBreakdown, LossWeights};
use crate::model::{ModelSpec, ModelState, Role};
use crate::optim::SgdMomentum;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const ATTACK_STREAM: u64 = 2;

/// What the update minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Guide and target co-trained on the dual-regularized loss.
    #[default]
    D2r,
    /// Baseline: the target alone, cross-entropy on adversarial inputs.
    PgdAt,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::D2r => "d2r",
            Objective::PgdAt => "pgd_at",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "d2r" => Some(Objective::D2r),
            "pgd_at" => Some(Objective::PgdAt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `(epoch, multiplier)` pairs; from the start of `epoch` (0-based) the
    /// learning rate is multiplied by `multiplier`, cumulatively.
    pub lr_schedule: Vec<(usize, f64)>,
    pub weights: LossWeights,
    /// Attack used to build training examples.
    pub attack: AttackConfig,
    pub generator: Generator,
    pub objective: Objective,
    pub seed: u64,
    /// Robustness probe run on the held-out split after every epoch.
    pub monitor: EvalAttack,
}

impl TrainConfig {
    /// Defaults: batch 128, lr 0.1, momentum 0.9, ×0.1 at 50% and 75% of the
    /// epochs, collaborative generation, PGD-20 monitoring.
    pub fn new(epochs: usize) -> Self {
        let attack = AttackConfig::default();
        Self {
            epochs,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            lr_schedule: Self::default_schedule(epochs),
            weights: LossWeights::default(),
            attack,
            generator: Generator::Cag,
            objective: Objective::D2r,
            seed: 0,
            monitor: EvalAttack::pgd20(attack.epsilon, attack.eta),
        }
    }

    pub fn default_schedule(epochs: usize) -> Vec<(usize, f64)> {
        let mut schedule: Vec<(usize, f64)> = Vec::new();
        for at in [epochs / 2, 3 * epochs / 4] {
            if at > 0 && schedule.last().is_none_or(|&(prev, _)| at > prev) {
                schedule.push((at, 0.1));
            }
        }
        schedule
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(at, _)| epoch >= at)
            .fold(self.lr, |lr, &(_, m)| lr * m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("learning-rate schedule epochs must be strictly increasing"));
        }
        if self.lr_schedule.iter().any(|&(_, m)| !(m >= 0.0 && m.is_finite())) {
            return Err(Error::invalid("learning-rate multipliers must be finite and non-negative"));
        }
        if self.generator == Generator::Fgsm {
            return Err(Error::invalid("training generator must be pgd, trades or cag"));
        }
        self.weights.validate()?;
        self.attack.validate()?;
        if let Some(c) = self.monitor.config() {
            c.validate()?;
        }
        Ok(())
    }
}

/// Clean and robust accuracy of one model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Accuracy {
    pub clean: f64,
    pub robust: f64,
}

/// Summary of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Per-step breakdowns averaged over the epoch.
    pub loss: LossBreakdown,
    pub gap_sign_positive_fraction: f64,
    pub gap_sign_negative_fraction: f64,
    pub guide: Accuracy,
    pub target: Accuracy,
}

/// States retained at the epoch with the best target robust accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct BestStates {
    pub epoch: usize,
    pub robust_accuracy: f64,
    pub guide: ModelState,
    pub target: ModelState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub guide: ModelState,
    pub target: ModelState,
    pub records: Vec<EpochRecord>,
    pub best: Option<BestStates>,
}

impl TrainOutcome {
    /// Fraction of all training steps whose clean KL gap was positive.
    pub fn gap_sign_positive_fraction(&self) -> f64 {
        let steps: usize = self.records.iter().map(|r| r.steps).sum();
        if steps == 0 {
            return 0.0;
        }
        let positive: f64 = self
            .records
            .iter()
            .map(|r| r.gap_sign_positive_fraction * r.steps as f64)
            .sum();
        positive / steps as f64
    }

    pub fn gap_sign_negative_fraction(&self) -> f64 {
        let steps: usize = self.records.iter().map(|r| r.steps).sum();
        if steps == 0 {
            return 0.0;
        }
        let negative: f64 = self
            .records
            .iter()
            .map(|r| r.gap_sign_negative_fraction * r.steps as f64)
            .sum();
        negative / steps as f64
    }
}

/// A guide/target pair with their optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    guide: ModelState,
    target: ModelState,
    guide_opt: SgdMomentum,
    target_opt: SgdMomentum,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(guide: ModelState, target: ModelState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (gs, ts) = (guide.spec(), target.spec());
        if gs.input_dim() != ts.input_dim() || gs.class_count() != ts.class_count() {
            return Err(Error::ShapeMismatch {
                op: "trainer",
                left: gs.layer_widths.clone(),
                right: ts.layer_widths.clone(),
            });
        }
        let guide_opt = SgdMomentum::new(guide.parameters(), config.momentum)?;
        let target_opt = SgdMomentum::new(target.parameters(), config.momentum)?;
        Ok(Self {
            guide,
            target,
            guide_opt,
            target_opt,
            config,
        })
    }

    pub fn guide(&self) -> &ModelState {
        &self.guide
    }

    pub fn target(&self) -> &ModelState {
        &self.target
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_models(self) -> (ModelState, ModelState) {
        (self.guide, self.target)
    }

    /// One synchronized update on a clean batch. Returns the loss measured
    /// before the update.
    pub fn step(&mut self, x: &Tensor, labels: &[usize], lr: f64, attack_seed: u64) -> Result<LossBreakdown> {
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let attack = self.config.attack.with_seed(attack_seed);
        let adv = generate(
            self.config.generator,
            Some(&self.guide),
            &self.target,
            x,
            labels,
            &attack,
        )?;
        match self.config.objective {
            Objective::D2r => self.d2r_step(x, &adv.x_adv, labels, lr),
            Objective::PgdAt => self.pgd_at_step(&adv.x_adv, labels, lr),
        }
    }

    fn d2r_step(&mut self, x: &Tensor, x_adv: &Tensor, labels: &[usize], lr: f64) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let guide = self.guide.bind(&mut tape, true);
        let target = self.target.bind(&mut tape, true);
        let clean = tape.constant(x.clone());
        let adversarial = tape.constant(x_adv.clone());
        let g_clean = guide.forward(&mut tape, clean)?;
        let t_clean = target.forward(&mut tape, clean)?;
        let t_adv = target.forward(&mut tape, adversarial)?;
        let terms = d2r_loss(&mut tape, g_clean, t_clean, t_adv, labels, &self.config.weights)
            .map_err(|e| non_finite_loss(e, "d2r loss"))?;
        let grads = tape.backward(terms.total)?;

        let guide_grads: Vec<&Tensor> = guide.params().iter().map(|&v| grads.get(v).expect("tracked")).collect();
        let target_grads: Vec<&Tensor> = target.params().iter().map(|&v| grads.get(v).expect("tracked")).collect();
        self.guide_opt.step(self.guide.parameters_mut(), &guide_grads, lr)?;
        self.target_opt.step(self.target.parameters_mut(), &target_grads, lr)?;
        Ok(terms.breakdown)
    }

    fn pgd_at_step(&mut self, x_adv: &Tensor, labels: &[usize], lr: f64) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let target = self.target.bind(&mut tape, true);
        let adversarial = tape.constant(x_adv.clone());
        let t_adv = target.forward(&mut tape, adversarial)?;
        let ce = cross_entropy(&mut tape, t_adv, labels).map_err(|e| non_finite_loss(e, "cross-entropy"))?;
        let grads = tape.backward(ce)?;
        let target_grads: Vec<&Tensor> = target.params().iter().map(|&v| grads.get(v).expect("tracked")).collect();
        self.target_opt.step(self.target.parameters_mut(), &target_grads, lr)?;
        let value = tape.value(ce).data()[0];
        Ok(LossBreakdown {
            ce: value,
            total: value,
            ..LossBreakdown::default()
        })
    }
}

fn non_finite_loss(err: Error, what: &'static str) -> Error {
    match err {
        Error::NonFinite { .. } => Error::NonFinite { op: what },
        other => other,
    }
}

/// Full training run; see [`train_with`].
pub fn train(
    guide_spec: &ModelSpec,
    target_spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(guide_spec, target_spec, dataset, config, |_| {})
}

/// Trains on the [`Split::Train`] samples and evaluates both models on the
/// [`Split::Test`] samples (or the training samples when there are none)
/// after every epoch, reporting each record to `on_epoch`.
pub fn train_with(
    guide_spec: &ModelSpec,
    target_spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    for spec in [guide_spec, target_spec] {
        spec.validate()?;
        if spec.input_dim() != dataset.dim() || spec.class_count() != dataset.class_count() {
            return Err(Error::invalid(format!(
                "model widths {:?} do not fit {}-dimensional data with {} classes",
                spec.layer_widths,
                dataset.dim(),
                dataset.class_count()
            )));
        }
    }
    let train_set = dataset.subset(Split::Train);
    let test_set = dataset.subset(Split::Test);
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    if config.epochs > 0 && (train_set.is_empty() || config.batch_size > train_set.len()) {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training samples",
            config.batch_size,
            train_set.len()
        )));
    }

    let guide = ModelState::init(guide_spec, Role::Guide)?;
    let target = ModelState::init(target_spec, Role::Target)?;
    let mut trainer = Trainer::new(guide, target, config.clone())?;
    let batches = BatchIterator::new(train_set.len(), config.batch_size, derive_seed(config.seed, SHUFFLE_STREAM))?;
    let attack_base = derive_seed(config.seed, ATTACK_STREAM) ^ config.attack.seed;

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<BestStates> = None;
    let mut global_step = 0u64;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        let (mut positive, mut negative, mut steps) = (0usize, 0usize, 0usize);
        for idx in batches.batches(epoch) {
            let (x, y) = train_set.batch(&idx)?;
            let b = trainer.step(&x, &y, lr, derive_seed(attack_base, global_step))?;
            global_step += 1;
            steps += 1;
            sum.ce += b.ce;
            sum.mse += b.mse;
            sum.kl_adv += b.kl_adv;
            sum.skl_gap += b.skl_gap;
            sum.total += b.total;
            match b.gap_sign {
                GapSign::Positive => positive += 1,
                GapSign::Negative => negative += 1,
                GapSign::Zero => {}
            }
        }
        let n = steps as f64;
        let loss = LossBreakdown {
            ce: sum.ce / n,
            mse: sum.mse / n,
            kl_adv: sum.kl_adv / n,
            skl_gap: sum.skl_gap / n,
            total: sum.total / n,
            gap_sign: match positive.cmp(&negative) {
                core::cmp::Ordering::Greater => GapSign::Positive,
                core::cmp::Ordering::Less => GapSign::Negative,
                core::cmp::Ordering::Equal => GapSign::Zero,
            },
        };
        let score = |model: &ModelState| -> Result<Accuracy> {
            Ok(Accuracy {
                clean: evaluate(model, eval_set, &EvalAttack::Clean)?,
                robust: evaluate(model, eval_set, &config.monitor)?,
            })
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            steps,
            loss,
            gap_sign_positive_fraction: positive as f64 / n,
            gap_sign_negative_fraction: negative as f64 / n,
            guide: score(trainer.guide())?,
            target: score(trainer.target())?,
        };
        if best.as_ref().is_none_or(|b| record.target.robust > b.robust_accuracy) {
            best = Some(BestStates {
                epoch: record.epoch,
                robust_accuracy: record.target.robust,
                guide: trainer.guide().clone(),
                target: trainer.target().clone(),
            });
        }
        on_epoch(&record);
        records.push(record);
    }
    let (guide, target) = trainer.into_models();
    Ok(TrainOutcome {
        guide,
        target,
        records,
        best,
    })
}
