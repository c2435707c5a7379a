//! SGD with classic momentum and L2 weight decay, plus the step-wise
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::Tensor;

/// One parameter update:
///   v <- momentum * v - lr * (g + weight_decay * w)
///   w <- w + v
/// With momentum and weight decay zero this is plain gradient descent.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape(format!(
            "sgd_step shapes disagree: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    for ((w, &g), v) in
        param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut())
    {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
    Ok(())
}

/// Momentum buffers keyed by parameter name, mirroring parameter shapes.
#[derive(Debug, Default)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new() -> OptimizerState {
        OptimizerState { velocity: BTreeMap::new() }
    }

    /// Update every network parameter in place. Weight decay only applies
    /// to parameters flagged for it (conv/fc weights).
    pub fn step(
        &mut self,
        net: &mut Network,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let mut result = Ok(());
        net.visit_params(&mut |name, p| {
            if result.is_err() {
                return;
            }
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let wd = if p.decay { weight_decay } else { 0.0 };
            if let Err(e) = sgd_step(&mut p.value, &p.grad, v, lr, momentum, wd) {
                result = Err(e);
            }
        });
        result
    }
}

/// Piecewise-constant learning rate: the initial rate until the first
/// drop epoch, then each scheduled rate from its epoch on.
pub fn lr_at(epoch: usize, initial: f64, schedule: &[(usize, f64)]) -> f64 {
    let mut lr = initial;
    for &(drop_epoch, rate) in schedule {
        if epoch >= drop_epoch {
            lr = rate;
        }
    }
    lr
}
