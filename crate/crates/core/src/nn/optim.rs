use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::{Error, Result, Scalar};

/// Optimizer choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    SgdMomentum { learning_rate: f64, momentum: f64 },
    Adam { learning_rate: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::SgdMomentum { learning_rate: 0.01, momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam(learning_rate: f64) -> Self {
        Self::Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Self::SgdMomentum { learning_rate, .. } | Self::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate must be > 0, got {lr}")));
        }
        match *self {
            Self::SgdMomentum { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::InvalidParameter(format!("momentum must lie in [0,1), got {momentum}")))
            }
            Self::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::InvalidParameter("adam betas must lie in [0,1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamStore<T>) -> Self {
        let zeros = || params.infos().iter().map(|i| vec![T::zero(); i.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self { kind, state: OptimizerState { step: 0, first: zeros(), second } }
    }

    /// Applies one update `params -= f(grads)`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.state.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { learning_rate, momentum } => {
                let (lr, mu) = (T::of(learning_rate), T::of(momentum));
                for ((p, g), v) in params.tensors_mut().zip(grads.tensors()).zip(&mut self.state.first) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { learning_rate, beta1, beta2, eps } => {
                let t = self.state.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (one, eps) = (T::one(), T::of(eps));
                let step = T::of(learning_rate / c1);
                let c2s = T::of(c2.sqrt());
                let buffers = self.state.first.iter_mut().zip(&mut self.state.second);
                for ((p, g), (m, v)) in params.tensors_mut().zip(grads.tensors()).zip(buffers) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= step * *m / ((*v).sqrt() / c2s + eps);
                    }
                }
            }
        }
    }
}
