//! Dual-regularized adversarial co-training of a guide/target classifier pair.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numerical piece:
//! a dense [`Tensor`], a reverse-mode [`Tape`], the distribution-matching
//! losses, L∞ attack generators, the co-training loop and the synthetic
//! datasets used to exercise it. File formats, configuration and the command
//! line live in the companion `d2r` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod autodiff;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
mod rng;
pub mod tensor;
pub mod train;

pub use attacks::{AdvBatch, AttackConfig, Generator, InitMode, InputBounds};
pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use data::{BatchIterator, Dataset, Split};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalAttack};
pub use losses::{GapSign, LossBreakdown, LossTerms, LossWeights};
pub use model::{Activation, ModelSpec, ModelState, Role};
pub use rng::derive_seed;
pub use tensor::Tensor;
pub use train::{EpochRecord, Objective, TrainConfig, TrainOutcome, Trainer};
