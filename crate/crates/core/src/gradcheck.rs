//! Central finite-difference checks of the tape's analytic gradients.
//!
//! [`finite_diff_check`] compares every parameter coordinate against
//! `(f(θ + h) − f(θ − h)) / 2h`. Coordinates whose perturbation moves a ReLU
//! or `|·|` across its kink (detected through [`Tape::branch_signature`])
//! are reported as excluded rather than compared.
//!
//! [`run_suite`] applies the check to every primitive, every loss and the
//! full co-training objective through both models' parameters.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{adg_loss, cross_entropy, d2r_loss, kl_divergence, mse_logits, symmetric_kl_gap, LossWeights};
use crate::model::{BoundModel, ModelSpec, ModelState, Role};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so that gradients that are
/// zero up to round-off are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Per parameter tensor, per element: relative error, or `None` when the
    /// coordinate sits next to a kink.
    pub rel_errors: Vec<Vec<Option<f64>>>,
    pub analytic: Vec<Tensor>,
    pub worst_rel_err: f64,
    pub checked: usize,
    pub excluded: usize,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst_rel_err < self.tol
    }
}

fn evaluate<F>(f: &F, params: &[Tensor], fault: Option<OpKind>) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_gradient_fault(op);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.try_value(out)?;
    if !value.is_scalar() {
        return Err(Error::NotScalar {
            shape: value.shape().to_vec(),
        });
    }
    if !value.data()[0].is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok((tape, vars, out))
}

/// Checks the analytic gradient of the scalar graph built by `f` over
/// `params` against central differences with step `h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with_fault(f, params, h, tol, None)
}

/// As [`finite_diff_check`], with the analytic pass optionally using a
/// deliberately corrupted gradient rule.
pub fn finite_diff_check_with_fault<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (tape, vars, out) = evaluate(&f, params, fault)?;
    let base_signature = tape.branch_signature();
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("params track gradients")).collect();

    let mut probe = params.to_vec();
    let mut rel_errors = Vec::with_capacity(params.len());
    let (mut worst, mut checked, mut excluded) = (0.0f64, 0usize, 0usize);
    for (pi, param) in params.iter().enumerate() {
        let mut errs = Vec::with_capacity(param.len());
        for j in 0..param.len() {
            let original = param.data()[j];
            probe[pi].data_mut()[j] = original + h;
            let (plus_tape, _, plus_out) = evaluate(&f, &probe, None)?;
            probe[pi].data_mut()[j] = original - h;
            let (minus_tape, _, minus_out) = evaluate(&f, &probe, None)?;
            probe[pi].data_mut()[j] = original;

            if plus_tape.branch_signature() != base_signature || minus_tape.branch_signature() != base_signature {
                excluded += 1;
                errs.push(None);
                continue;
            }
            let fp = plus_tape.value(plus_out).data()[0];
            let fm = minus_tape.value(minus_out).data()[0];
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[pi].data()[j], numeric);
            worst = worst.max(err);
            checked += 1;
            errs.push(Some(err));
        }
        rel_errors.push(errs);
    }
    Ok(FdReport {
        rel_errors,
        analytic,
        worst_rel_err: worst,
        checked,
        excluded,
        tol,
    })
}

/// One named entry of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub report: FdReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Uniform in `±[0.1, 1]`, keeping clear of the kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

type Graph = fn(&mut Tape, &[Var], &Fixture) -> Result<Var>;

/// Constant data shared by the suite's graphs.
struct Fixture {
    weights: Tensor,
    labels: Vec<usize>,
    binary_labels: Vec<usize>,
    x_clean: Tensor,
    x_adv: Tensor,
    guide_layers: usize,
}

fn weighted_sum(tape: &mut Tape, v: Var, fx: &Fixture) -> Result<Var> {
    let w = tape.constant(fx.weights.clone());
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// Every check of the suite: `(name, graph, parameter shapes/initializers)`.
fn suite_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Graph, Vec<Tensor>)> {
    const B: usize = 4;
    const K: usize = 3;
    let s = [B, K];
    let mut cases: Vec<(&'static str, Graph, Vec<Tensor>)> = Vec::new();
    cases.push((
        "add",
        |t, p, fx| {
            let v = t.add(p[0], p[1])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "add_broadcast",
        |t, p, fx| {
            let v = t.add(p[0], p[1])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[K], -1.0, 1.0)],
    ));
    cases.push((
        "sub",
        |t, p, fx| {
            let v = t.sub(p[0], p[1])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &[B, 1], -1.0, 1.0)],
    ));
    cases.push((
        "mul",
        |t, p, fx| {
            let v = t.mul(p[0], p[1])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0), uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "scale",
        |t, p, fx| {
            let v = t.scale(p[0], -2.5)?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "matmul",
        |t, p, fx| {
            let v = t.matmul(p[0], p[1])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &[B, 5], -1.0, 1.0), uniform(rng, &[5, K], -1.0, 1.0)],
    ));
    cases.push((
        "relu",
        |t, p, fx| {
            let v = t.relu(p[0])?;
            weighted_sum(t, v, fx)
        },
        vec![away_from_zero(rng, &s)],
    ));
    cases.push((
        "abs",
        |t, p, fx| {
            let v = t.abs(p[0])?;
            weighted_sum(t, v, fx)
        },
        vec![away_from_zero(rng, &s)],
    ));
    cases.push((
        "square",
        |t, p, fx| {
            let v = t.square(p[0])?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "log_softmax",
        |t, p, fx| {
            let v = t.log_softmax(p[0], 1)?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "log_softmax_axis0",
        |t, p, fx| {
            let v = t.log_softmax(p[0], 0)?;
            weighted_sum(t, v, fx)
        },
        vec![uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "sum",
        |t, p, _| {
            let sq = t.square(p[0])?;
            t.sum(sq)
        },
        vec![uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "mean",
        |t, p, _| {
            let sq = t.square(p[0])?;
            t.mean(sq)
        },
        vec![uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "gather",
        |t, p, fx| {
            let sq = t.square(p[0])?;
            let g = t.gather(sq, &fx.labels)?;
            t.sum(g)
        },
        vec![uniform(rng, &s, -1.0, 1.0)],
    ));
    cases.push((
        "kl_div",
        |t, p, _| t.kl_div(p[0], p[1]),
        vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "cross_entropy",
        |t, p, fx| cross_entropy(t, p[0], &fx.labels),
        vec![uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "mse_logits",
        |t, p, _| mse_logits(t, p[0], p[1]),
        vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "kl_divergence",
        |t, p, _| kl_divergence(t, p[0], p[1]),
        vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "symmetric_kl_gap",
        |t, p, _| Ok(symmetric_kl_gap(t, p[0], p[1])?.0),
        vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "adg_loss",
        |t, p, fx| {
            let w = LossWeights::new(1.0, 30.0, 0.0)?;
            Ok(adg_loss(t, p[0], p[1], &fx.labels, &w)?.total)
        },
        vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)],
    ));
    cases.push((
        "d2r_loss",
        |t, p, fx| {
            let w = LossWeights::new(1.0, 30.0, 20.0)?;
            Ok(d2r_loss(t, p[0], p[1], p[2], &fx.labels, &w)?.total)
        },
        vec![
            uniform(rng, &s, -2.0, 2.0),
            uniform(rng, &s, -2.0, 2.0),
            uniform(rng, &s, -2.0, 2.0),
        ],
    ));
    cases
}

/// Guide `[3, 4, 2]` and target `[3, 6, 5, 2]` at random He init.
fn model_pair() -> (ModelState, ModelState) {
    let guide = ModelState::init(&ModelSpec::new(vec![3, 4, 2], 11).expect("valid"), Role::Guide).expect("valid");
    let target =
        ModelState::init(&ModelSpec::new(vec![3, 6, 5, 2], 12).expect("valid"), Role::Target).expect("valid");
    (guide, target)
}

fn model_cases() -> Vec<(&'static str, Graph, Vec<Tensor>)> {
    let (guide, target) = model_pair();
    let mut pair: Vec<Tensor> = guide.parameters().cloned().collect();
    pair.extend(target.parameters().cloned());
    vec![
        (
            "forward_cross_entropy",
            |t, p, fx| {
                let model = BoundModel::from_params(p.to_vec())?;
                let x = t.constant(fx.x_clean.clone());
                let logits = model.forward(t, x)?;
                cross_entropy(t, logits, &fx.binary_labels)
            },
            target.parameters().cloned().collect(),
        ),
        (
            "d2r_objective",
            |t, p, fx| {
                let guide = BoundModel::from_params(p[..fx.guide_layers * 2].to_vec())?;
                let target = BoundModel::from_params(p[fx.guide_layers * 2..].to_vec())?;
                let clean = t.constant(fx.x_clean.clone());
                let adv = t.constant(fx.x_adv.clone());
                let g_clean = guide.forward(t, clean)?;
                let t_clean = target.forward(t, clean)?;
                let t_adv = target.forward(t, adv)?;
                let w = LossWeights::new(1.0, 30.0, 20.0)?;
                Ok(d2r_loss(t, g_clean, t_clean, t_adv, &fx.binary_labels, &w)?.total)
            },
            pair,
        ),
    ]
}

/// Gradient with respect to the input, as used by the attack generators.
fn input_case(rng: &mut ChaCha8Rng) -> (&'static str, Graph, Vec<Tensor>) {
    (
        "attack_input_kl",
        |t, p, fx| {
            let (guide, target) = model_pair();
            let reference = t.constant(guide.predict(&fx.x_clean)?);
            let model = target.bind(t, false);
            let logits = model.forward(t, p[0])?;
            kl_divergence(t, logits, reference)
        },
        vec![uniform(rng, &[4, 3], 0.05, 0.95)],
    )
}

/// Runs every check at `h = 1e-5` and tolerance `1e-4`, deterministic for a
/// fixed build.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<SuiteCheck>> {
    let mut rng = seeded(0x5eed);
    let fixture = Fixture {
        weights: uniform(&mut rng, &[4, 3], -1.0, 1.0),
        labels: vec![0, 2, 1, 1],
        binary_labels: vec![0, 1, 1, 0],
        x_clean: uniform(&mut rng, &[4, 3], 0.0, 1.0),
        x_adv: uniform(&mut rng, &[4, 3], 0.0, 1.0),
        guide_layers: 2,
    };
    let mut cases = suite_cases(&mut rng);
    cases.push(input_case(&mut rng));
    cases.extend(model_cases());
    cases
        .into_iter()
        .map(|(name, graph, params)| {
            let report = finite_diff_check_with_fault(
                |t, p| graph(t, p, &fixture),
                &params,
                DEFAULT_STEP,
                SUITE_TOLERANCE,
                fault,
            )?;
            Ok(SuiteCheck { name, report })
        })
        .collect()
}
