//! Classification and distribution-matching losses, and their composition
//! into the guided adversarial objectives.
//!
//! Every loss is a batch mean and is recorded on a [`Tape`], so gradients
//! reach every logit tensor involved (both models are trained jointly).

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Weights of the composed objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Guide cross-entropy weight.
    pub lambda: f64,
    /// Adversarial KL weight.
    pub alpha: f64,
    /// Clean symmetric-KL-gap weight.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { lambda, alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(alloc::format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// `λ = 1, α = 30, β = 20`.
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 30.0,
            beta: 20.0,
        }
    }
}

/// Sign of `KL(f_t ∥ f_g) − KL(f_g ∥ f_t)` on clean inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapSign {
    Positive,
    Negative,
    #[default]
    Zero,
}

impl GapSign {
    fn of(diff: f64) -> Self {
        if diff > 0.0 {
            GapSign::Positive
        } else if diff < 0.0 {
            GapSign::Negative
        } else {
            GapSign::Zero
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GapSign::Positive => "positive",
            GapSign::Negative => "negative",
            GapSign::Zero => "zero",
        }
    }
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mse: f64,
    pub kl_adv: f64,
    pub skl_gap: f64,
    pub total: f64,
    pub gap_sign: GapSign,
}

impl LossBreakdown {
    /// Recomposes the total from the components under `weights`.
    pub fn recompose(&self, weights: &LossWeights) -> f64 {
        weights.lambda * self.ce + self.mse + weights.alpha * self.kl_adv + weights.beta * self.skl_gap
    }
}

/// Differentiable total plus its breakdown.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (ta, tb) = (tape.try_value(a)?, tape.try_value(b)?);
    if ta.shape() != tb.shape() || ta.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(log_probs, labels)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -1.0)
}

/// Mean squared difference over all `B·K` logits.
pub fn mse_logits(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "mse_logits", a, b)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Batch mean of `KL(softmax(p) ∥ softmax(q))`.
pub fn kl_divergence(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    same_shape(tape, "kl_divergence", p_logits, q_logits)?;
    tape.kl_div(p_logits, q_logits)
}

/// `|KL(t ∥ g) − KL(g ∥ t)|` and the sign of the difference before taking
/// the absolute value. The gradient is the signed subgradient, 0 at a tie.
pub fn symmetric_kl_gap(tape: &mut Tape, t_logits: Var, g_logits: Var) -> Result<(Var, GapSign)> {
    same_shape(tape, "symmetric_kl_gap", t_logits, g_logits)?;
    let forward = tape.kl_div(t_logits, g_logits)?;
    let reverse = tape.kl_div(g_logits, t_logits)?;
    let diff = tape.sub(forward, reverse)?;
    let sign = GapSign::of(scalar(tape, diff));
    Ok((tape.abs(diff)?, sign))
}

/// `CE(g_clean, y) + MSE(g_clean, t_adv) + α·KL(g_clean ∥ t_adv)`.
pub fn adg_loss(
    tape: &mut Tape,
    g_clean: Var,
    t_adv: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let ce = cross_entropy(tape, g_clean, labels)?;
    let mse = mse_logits(tape, g_clean, t_adv)?;
    let kl = kl_divergence(tape, g_clean, t_adv)?;
    let weighted_kl = tape.scale(kl, weights.alpha)?;
    let partial = tape.add(ce, mse)?;
    let total = tape.add(partial, weighted_kl)?;
    Ok(LossTerms {
        total,
        breakdown: LossBreakdown {
            ce: scalar(tape, ce),
            mse: scalar(tape, mse),
            kl_adv: scalar(tape, kl),
            skl_gap: 0.0,
            total: scalar(tape, total),
            gap_sign: GapSign::Zero,
        },
    })
}

/// `λ·CE(g_clean, y) + MSE(g_clean, t_adv) + α·KL(g_clean ∥ t_adv)
///  + β·|KL(t_clean ∥ g_clean) − KL(g_clean ∥ t_clean)|`.
pub fn d2r_loss(
    tape: &mut Tape,
    g_clean: Var,
    t_clean: Var,
    t_adv: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    same_shape(tape, "d2r_loss", g_clean, t_clean)?;
    let ce = cross_entropy(tape, g_clean, labels)?;
    let mse = mse_logits(tape, g_clean, t_adv)?;
    let kl = kl_divergence(tape, g_clean, t_adv)?;
    let (gap, gap_sign) = symmetric_kl_gap(tape, t_clean, g_clean)?;

    let weighted_ce = tape.scale(ce, weights.lambda)?;
    let weighted_kl = tape.scale(kl, weights.alpha)?;
    let weighted_gap = tape.scale(gap, weights.beta)?;
    let partial = tape.add(weighted_ce, mse)?;
    let partial = tape.add(partial, weighted_kl)?;
    let total = tape.add(partial, weighted_gap)?;
    Ok(LossTerms {
        total,
        breakdown: LossBreakdown {
            ce: scalar(tape, ce),
            mse: scalar(tape, mse),
            kl_adv: scalar(tape, kl),
            skl_gap: scalar(tape, gap),
            total: scalar(tape, total),
            gap_sign,
        },
    })
}
