//! Clean and white-box robust accuracy.

use alloc::format;
use alloc::string::String;

use crate::attacks::{fgsm, pgd, trades_gen, AttackConfig, InitMode};
use crate::autodiff::log_softmax_along;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const EVAL_BATCH_SIZE: usize = 256;

/// What to do to the inputs before scoring. Attacks target the evaluated
/// model itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalAttack {
    Clean,
    Fgsm(AttackConfig),
    Pgd(AttackConfig),
    Trades(AttackConfig),
}

impl EvalAttack {
    /// PGD-20 from the clean point, the default robustness probe.
    pub fn pgd20(epsilon: f64, eta: f64) -> Self {
        EvalAttack::Pgd(AttackConfig {
            epsilon,
            eta,
            iterations: 20,
            init: InitMode::Zero,
            ..AttackConfig::default()
        })
    }

    /// Metric label, e.g. `clean_acc`, `robust_acc@pgd20`, `robust_acc@fgsm`.
    pub fn metric_name(&self) -> String {
        match self {
            EvalAttack::Clean => String::from("clean_acc"),
            EvalAttack::Fgsm(_) => String::from("robust_acc@fgsm"),
            EvalAttack::Pgd(c) => format!("robust_acc@pgd{}", c.iterations),
            EvalAttack::Trades(c) => format!("robust_acc@trades{}", c.iterations),
        }
    }

    pub fn config(&self) -> Option<&AttackConfig> {
        match self {
            EvalAttack::Clean => None,
            EvalAttack::Fgsm(c) | EvalAttack::Pgd(c) | EvalAttack::Trades(c) => Some(c),
        }
    }
}

/// Fraction of argmax-correct predictions over every sample of `dataset`.
pub fn evaluate(model: &ModelState, dataset: &Dataset, attack: &EvalAttack) -> Result<f64> {
    evaluate_batched(model, dataset, attack, EVAL_BATCH_SIZE)
}

pub fn evaluate_batched(
    model: &ModelState,
    dataset: &Dataset,
    attack: &EvalAttack,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if dataset.dim() != model.spec().input_dim() || dataset.class_count() != model.spec().class_count() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            left: alloc::vec![dataset.dim(), dataset.class_count()],
            right: alloc::vec![model.spec().input_dim(), model.spec().class_count()],
        });
    }
    let mut correct = 0usize;
    let indices: alloc::vec::Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = dataset.batch(chunk)?;
        let with_seed = |c: &AttackConfig| c.with_seed(derive_seed(c.seed, chunk[0] as u64));
        let inputs = match attack {
            EvalAttack::Clean => x,
            EvalAttack::Fgsm(c) => fgsm(model, &x, &y, c)?.x_adv,
            EvalAttack::Pgd(c) => pgd(model, &x, &y, &with_seed(c))?.x_adv,
            EvalAttack::Trades(c) => trades_gen(model, &x, &with_seed(c))?.x_adv,
        };
        let predicted = model.predict(&inputs)?.argmax_rows()?;
        correct += predicted.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Row-wise softmax of the model's logits.
pub fn class_probabilities(model: &ModelState, x: &Tensor) -> Result<Tensor> {
    let logits = model.predict(x)?;
    let log_probs = log_softmax_along(logits.data(), logits.shape(), 1);
    Tensor::new(logits.shape().to_vec(), log_probs.into_iter().map(libm::exp).collect())
}
