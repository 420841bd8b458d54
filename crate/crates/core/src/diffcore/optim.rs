use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::ParameterStore;
use crate::{Error, Result};

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter in name order, then clears all
    /// gradients. Fails without touching anything if a trainable parameter
    /// has no gradient.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let names: Vec<String> = store
            .names()
            .filter(|n| trainable(n))
            .map(ToString::to_string)
            .collect();
        if let Some(missing) = names.iter().find(|n| store.grad(n).is_none()) {
            return Err(Error::Usage(format!("parameter {missing} has no gradient")));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for name in &names {
            let grad = store.grad(name).expect("checked").data().to_vec();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let value = store.value_mut(name).expect("listed");
            for (((w, g), m), v) in value.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        store.zero_grads();
        store.bump_steps();
        Ok(())
    }
}
