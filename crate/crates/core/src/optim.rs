//! SGD with momentum: `v ← μ·v + g`, `θ ← θ − η·v`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S: Real> {
    pub learning_rate: f64,
    pub momentum: f64,
    /// One buffer per parameter, in store order.
    pub velocity: Vec<Vec<S>>,
}

impl<S: Real> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            velocity: store.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn with_defaults(store: &ParamStore<S>) -> Self {
        Self::new(store, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM)
    }
}

/// Applies one update to every parameter and clears the gradients.
///
/// Fails without touching anything if a parameter has no gradient.
pub fn sgd_step<S: Real>(store: &mut ParamStore<S>, opt: &mut OptimizerState<S>) -> Result<()> {
    if opt.velocity.len() != store.len() {
        return Err(Error::Config(alloc::format!(
            "optimizer tracks {} parameters, store has {}",
            opt.velocity.len(),
            store.len()
        )));
    }
    if let Some(p) = store.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let lr = S::from_f64(opt.learning_rate);
    let mu = S::from_f64(opt.momentum);
    for (p, v) in store.iter_mut().zip(&mut opt.velocity) {
        let g = p.tensor.take_grad().expect("checked above");
        for ((theta, vel), gv) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = mu * *vel + gv;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}
