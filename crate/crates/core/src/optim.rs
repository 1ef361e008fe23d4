//! SGD with heavy-ball momentum.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `v ← momentum·v + g; p ← p − lr·v`, elementwise over aligned tensors.
pub fn sgd_momentum_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("params, grads and velocity must align"));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_momentum_update",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
        p.check_finite("sgd_momentum_update")?;
    }
    Ok(())
}

/// Velocity buffers for one set of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(Self {
            momentum,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[&Tensor],
        lr: f64,
    ) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        sgd_momentum_update(&mut params, grads, &mut self.velocity, lr, self.momentum)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}
