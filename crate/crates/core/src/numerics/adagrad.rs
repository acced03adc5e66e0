use super::ParamStore;
use crate::error::{Error, Result};

/// Adagrad with per-coordinate squared-gradient accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct AdagradState {
    pub learning_rate: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<f64>>,
}

impl AdagradState {
    pub fn new(store: &ParamStore, learning_rate: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            learning_rate,
            epsilon,
            accumulators: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
        })
    }

    pub fn accumulator(&self, index: usize) -> &[f64] {
        &self.accumulators[index]
    }

    /// `acc += g²; p −= lr · g / (√acc + ε)`. The whole step is rejected if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.accumulators.len() {
            return Err(Error::Contract(format!(
                "adagrad got {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((id, p), g) in store.iter().zip(grads) {
            if g.len() != p.value.numel() {
                return Err(Error::shape("adagrad", p.value.shape(), &[g.len()]));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), acc) in ids.into_iter().zip(grads).zip(&mut self.accumulators) {
            let values = store.value_mut(id).data_mut();
            for ((p, &gv), a) in values.iter_mut().zip(g).zip(acc.iter_mut()) {
                if gv == 0.0 {
                    continue;
                }
                *a += gv * gv;
                *p -= self.learning_rate * gv / (a.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
