//! L∞-bounded adversarial example generation.
//!
//! All generators share one sign-gradient ascent loop: start from the clean
//! batch (or a uniform random point of the ε-ball), step by `η·sign(∇)` and
//! project back onto the ball intersected with the input bounds. They differ
//! only in the objective being ascended:
//!
//! | generator | objective                      |
//! |-----------|--------------------------------|
//! | fgsm, pgd | `CE(f(x'), y)`                 |
//! | trades    | `KL(f(x') ∥ f(x))`             |
//! | cag       | `KL(f_target(x') ∥ f_guide(x))` |
//!
//! Reference logits (`f(x)`, `f_guide(x)`) are computed once per batch and
//! held constant. Model parameters are recorded as constants, so only input
//! gradients are computed.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{sign, Tape};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kl_divergence};
use crate::model::ModelState;
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Valid input range, applied elementwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputBounds {
    pub low: f64,
    pub high: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self { low: 0.0, high: 1.0 }
    }
}

/// Starting point of the iterative generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    Zero,
    #[default]
    UniformBall,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Zero => "zero",
            InitMode::UniformBall => "uniform",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "zero" => Some(InitMode::Zero),
            "uniform" => Some(InitMode::UniformBall),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius in input units.
    pub epsilon: f64,
    /// Step size per iteration.
    pub eta: f64,
    pub iterations: usize,
    pub init: InitMode,
    pub bounds: InputBounds,
    pub seed: u64,
}

impl Default for AttackConfig {
    /// ε = 0.031, η = 0.007, 10 iterations, random start in [0, 1].
    fn default() -> Self {
        Self {
            epsilon: 0.031,
            eta: 0.007,
            iterations: 10,
            init: InitMode::UniformBall,
            bounds: InputBounds::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= self.epsilon && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "attack needs 0 < eta <= epsilon, got eta={} epsilon={}",
                self.eta, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("attack needs at least one iteration"));
        }
        self.validate_bounds()
    }

    fn validate_bounds(&self) -> Result<()> {
        if !(self.bounds.low < self.bounds.high) {
            return Err(Error::invalid("input bounds need low < high"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Generator {
    Fgsm,
    Pgd,
    Trades,
    Cag,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::Fgsm, Generator::Pgd, Generator::Trades, Generator::Cag];

    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Fgsm => "fgsm",
            Generator::Pgd => "pgd",
            Generator::Trades => "trades",
            Generator::Cag => "cag",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == name)
    }
}

/// Clean batch together with its adversarial counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x_clean: Tensor,
    pub x_adv: Tensor,
    pub generator: Generator,
}

impl AdvBatch {
    /// `‖x_adv − x_clean‖∞`.
    pub fn linf_distance(&self) -> f64 {
        self.x_clean.max_abs_diff(&self.x_adv).expect("same shape by construction")
    }
}

/// Clamps `x_adv` into `[x_clean − ε, x_clean + ε] ∩ [low, high]`.
pub fn project_linf(x_adv: &Tensor, x_clean: &Tensor, epsilon: f64, bounds: InputBounds) -> Result<Tensor> {
    if x_adv.shape() != x_clean.shape() {
        return Err(Error::ShapeMismatch {
            op: "project_linf",
            left: x_adv.shape().to_vec(),
            right: x_clean.shape().to_vec(),
        });
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x_clean.data())
        .map(|(&a, &c)| clamp_one(a, c, epsilon, bounds))
        .collect();
    Tensor::new(x_adv.shape().to_vec(), data)
}

fn clamp_one(adv: f64, clean: f64, epsilon: f64, bounds: InputBounds) -> f64 {
    adv.clamp(clean - epsilon, clean + epsilon).clamp(bounds.low, bounds.high)
}

fn ascent_step(current: &Tensor, clean: &Tensor, grad: &Tensor, step: f64, cfg: &AttackConfig) -> Tensor {
    let data = current
        .data()
        .iter()
        .zip(clean.data())
        .zip(grad.data())
        .map(|((&x, &c), &g)| clamp_one(x + step * sign(g), c, cfg.epsilon, cfg.bounds))
        .collect();
    Tensor::from_parts(current.shape().to_vec(), data)
}

fn start_point(x: &Tensor, cfg: &AttackConfig) -> Tensor {
    match cfg.init {
        InitMode::Zero => x.clone(),
        InitMode::UniformBall => {
            let mut rng = seeded(cfg.seed);
            let eps = cfg.epsilon;
            let data = x
                .data()
                .iter()
                .map(|&c| {
                    let delta = if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 };
                    clamp_one(c + delta, c, eps, cfg.bounds)
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
    }
}

/// Runs the sign-gradient loop, returning every iterate (start included).
fn ascend(
    x: &Tensor,
    cfg: &AttackConfig,
    mut gradient: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<Tensor>> {
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut current = start_point(x, cfg);
    for _ in 0..cfg.iterations {
        let grad = gradient(&current)?;
        let next = ascent_step(&current, x, &grad, cfg.eta, cfg);
        trace.push(current);
        current = next;
    }
    trace.push(current);
    Ok(trace)
}

fn check_batch(model: &ModelState, x: &Tensor) -> Result<()> {
    let (_, d) = x.dims2()?;
    if d != model.spec().input_dim() {
        return Err(Error::ShapeMismatch {
            op: "attack",
            left: x.shape().to_vec(),
            right: alloc::vec![model.spec().input_dim()],
        });
    }
    Ok(())
}

/// `∇_x CE(f(x), y)` with the model held constant.
pub fn input_gradient_ce(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let input = tape.param(x.clone());
    let logits = bound.forward(&mut tape, input)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(input).expect("input tracks gradients"))
}

/// `∇_x KL(f(x) ∥ reference)` with the model and the reference logits held
/// constant.
pub fn input_gradient_kl(model: &ModelState, x: &Tensor, reference_logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let input = tape.param(x.clone());
    let reference = tape.constant(reference_logits.clone());
    let logits = bound.forward(&mut tape, input)?;
    let loss = kl_divergence(&mut tape, logits, reference)?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(input).expect("input tracks gradients"))
}

/// `KL(f(x) ∥ reference)` as a plain number.
pub fn kl_to_reference(model: &ModelState, x: &Tensor, reference_logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let logits = tape.constant(model.predict(x)?);
    let reference = tape.constant(reference_logits.clone());
    let kl = kl_divergence(&mut tape, logits, reference)?;
    Ok(tape.value(kl).data()[0])
}

/// Single signed step of size ε on the cross-entropy.
pub fn fgsm(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    check_batch(model, x)?;
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::invalid("fgsm needs a finite, non-negative epsilon"));
    }
    cfg.validate_bounds()?;
    let grad = input_gradient_ce(model, x, labels)?;
    let x_adv = ascent_step(x, x, &grad, cfg.epsilon, cfg);
    Ok(AdvBatch {
        x_clean: x.clone(),
        x_adv,
        generator: Generator::Fgsm,
    })
}

/// Iterated projected sign-gradient ascent on the cross-entropy.
pub fn pgd(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    let mut trace = pgd_trace(model, x, labels, cfg)?;
    Ok(AdvBatch {
        x_clean: x.clone(),
        x_adv: trace.pop().expect("non-empty trace"),
        generator: Generator::Pgd,
    })
}

/// All PGD iterates, from the starting point to the final example.
pub fn pgd_trace(model: &ModelState, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    check_batch(model, x)?;
    ascend(x, cfg, |current| input_gradient_ce(model, current, labels))
}

/// Single-model KL ascent away from the model's own clean prediction.
pub fn trades_gen(model: &ModelState, x: &Tensor, cfg: &AttackConfig) -> Result<AdvBatch> {
    let mut trace = trades_trace(model, x, cfg)?;
    Ok(AdvBatch {
        x_clean: x.clone(),
        x_adv: trace.pop().expect("non-empty trace"),
        generator: Generator::Trades,
    })
}

pub fn trades_trace(model: &ModelState, x: &Tensor, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    check_batch(model, x)?;
    let reference = model.predict(x)?;
    ascend(x, cfg, |current| input_gradient_kl(model, current, &reference))
}

/// Collaborative generation: ascend `KL(f_target(x') ∥ f_guide(x))`, with the
/// guide's clean logits fixed for the whole batch.
pub fn cag_gen(guide: &ModelState, target: &ModelState, x: &Tensor, cfg: &AttackConfig) -> Result<AdvBatch> {
    let mut trace = cag_trace(guide, target, x, cfg)?;
    Ok(AdvBatch {
        x_clean: x.clone(),
        x_adv: trace.pop().expect("non-empty trace"),
        generator: Generator::Cag,
    })
}

pub fn cag_trace(guide: &ModelState, target: &ModelState, x: &Tensor, cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    if guide.spec().input_dim() != target.spec().input_dim()
        || guide.spec().class_count() != target.spec().class_count()
    {
        return Err(Error::ShapeMismatch {
            op: "cag_gen",
            left: guide.spec().layer_widths.clone(),
            right: target.spec().layer_widths.clone(),
        });
    }
    check_batch(target, x)?;
    let reference = guide.predict(x)?;
    ascend(x, cfg, |current| input_gradient_kl(target, current, &reference))
}

/// Dispatches to the named generator. `cag` needs the guide; the others
/// attack `model` alone.
pub fn generate(
    generator: Generator,
    guide: Option<&ModelState>,
    model: &ModelState,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    match generator {
        Generator::Fgsm => fgsm(model, x, labels, cfg),
        Generator::Pgd => pgd(model, x, labels, cfg),
        Generator::Trades => trades_gen(model, x, cfg),
        Generator::Cag => {
            let guide = guide.ok_or_else(|| Error::invalid("cag generation needs a guide model"))?;
            cag_gen(guide, model, x, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, Role};
    use alloc::vec;

    fn bounds01() -> InputBounds {
        InputBounds::default()
    }

    #[test]
    fn projection_examples() {
        let clean = Tensor::vector(vec![0.5]).unwrap();
        let inside = Tensor::vector(vec![0.51]).unwrap();
        assert_eq!(project_linf(&inside, &clean, 0.031, bounds01()).unwrap(), inside);

        let out = project_linf(&Tensor::vector(vec![0.6]).unwrap(), &clean, 0.031, bounds01()).unwrap();
        assert!((out.data()[0] - 0.531).abs() < 1e-15);

        let clean = Tensor::vector(vec![0.01]).unwrap();
        let adv = Tensor::vector(vec![-0.1]).unwrap();
        assert_eq!(project_linf(&adv, &clean, 0.05, bounds01()).unwrap().data(), &[0.0]);
    }

    #[test]
    fn projection_shape_mismatch() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(project_linf(&a, &b, 0.1, bounds01()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.eta = 0.05;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig { iterations: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg = AttackConfig {
            bounds: InputBounds { low: 1.0, high: 1.0 },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn generator_names() {
        for g in Generator::ALL {
            assert_eq!(Generator::from_name(g.as_str()), Some(g));
        }
        assert_eq!(Generator::from_name("cw"), None);
    }

    #[test]
    fn fgsm_zero_radius_is_identity() {
        let spec = ModelSpec::new(vec![2, 4, 2], 3).unwrap();
        let m = ModelState::init(&spec, Role::Target).unwrap();
        let x = Tensor::from_rows(&[[0.2, 0.8], [0.5, 0.5]]).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.0,
            eta: 0.0,
            ..Default::default()
        };
        assert_eq!(fgsm(&m, &x, &[0, 1], &cfg).unwrap().x_adv, x);
    }

    #[test]
    fn cag_needs_matching_models() {
        let g = ModelState::init(&ModelSpec::new(vec![2, 3], 0).unwrap(), Role::Guide).unwrap();
        let t = ModelState::init(&ModelSpec::new(vec![2, 4], 0).unwrap(), Role::Target).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(cag_gen(&g, &t, &x, &AttackConfig::default()).is_err());
        assert!(generate(Generator::Cag, None, &t, &x, &[0], &AttackConfig::default()).is_err());
    }
}
