//! First-order optimizers over a [`ParamStore`].

use std::collections::HashMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment (or plain SGD) optimizer state.
///
/// Moment buffers are keyed by parameter and created lazily, so they
/// always match the parameter shape.
#[derive(Clone, Debug)]
pub struct Optimizer<E = f32> {
    pub config: OptimizerConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[E], &[E])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Applies one update to every listed parameter. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<E>, grads: &Gradients<E>, params: &[ParamId]) -> Result<()> {
        if grads.store_id() != store.id() {
            return Err(Error::State("gradients were computed against a different parameter store".into()));
        }
        for &id in params {
            if let Some(g) = grads.param(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::dim(format!(
                        "gradient for {} has shape {:?}, parameter has {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    )));
                }
                if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {} at element {pos} (optimizer step {})",
                        store.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = E::lit(c.learning_rate);
        for &id in params {
            let numel = store.get(id).numel();
            let zeros;
            let g = match grads.param(id) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![E::zero(); numel];
                    &zeros
                }
            };
            match c.kind {
                OptimizerKind::Sgd => {
                    for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .moments
                        .entry(id)
                        .or_insert_with(|| (vec![E::zero(); numel], vec![E::zero(); numel]));
                    let (b1, b2) = (E::lit(c.beta1), E::lit(c.beta2));
                    let bc1 = E::lit(1.0 - c.beta1.powi(self.step as i32));
                    let bc2 = E::lit(1.0 - c.beta2.powi(self.step as i32));
                    let eps = E::lit(c.epsilon);
                    let p = store.get_mut(id).data_mut();
                    for i in 0..numel {
                        m[i] = b1 * m[i] + (E::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (E::one() - b2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
