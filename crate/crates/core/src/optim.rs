//! Trainable parameter groups and the decoupled-weight-decay Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Fnv, Tensor};

#[derive(Clone, Debug)]
struct Slot {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Named trainable tensors plus per-parameter optimizer moments.
///
/// Moment buffers always mirror their parameter's shape.
#[derive(Clone, Debug, Default)]
pub struct ParamGroup {
    slots: BTreeMap<String, Slot>,
    steps: u64,
}

impl ParamGroup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `tensor` as trainable under `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        let n = tensor.numel();
        self.slots.insert(
            name,
            Slot {
                tensor: tensor.into_trainable(),
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Overwrites a parameter's values in place (shape preserved).
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter `{name}`")))?;
        if data.len() != slot.tensor.numel() {
            return Err(Error::Dimension(format!(
                "`{name}` holds {} values, got {}",
                slot.tensor.numel(),
                data.len()
            )));
        }
        slot.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.slots.remove(name).map(|s| s.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.tensor.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) -> Result<()> {
        self.slots
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?
            .tensor
            .accumulate_grad(g)
    }

    pub fn zero_grad(&mut self) {
        self.slots.values_mut().for_each(|s| s.tensor.clear_grad());
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Checksum over names and values (not optimizer state).
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, slot) in &self.slots {
            for b in name.bytes() {
                h.write_u64(b as u64);
            }
            h.write_u64(slot.tensor.checksum());
        }
        h.finish()
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.slots.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        AdamW { lr, ..Self::default() }
    }
}

/// One in-place AdamW update over every parameter that holds a gradient.
/// Parameters without a gradient (not reached by the loss) are left
/// untouched, moments included. Gradients are consumed by the step.
pub fn adamw_step(params: &mut ParamGroup, opt: &AdamW) -> Result<()> {
    if !params.slots.values().any(|s| s.tensor.grad().is_some()) {
        return Err(Error::State("optimizer step without any gradient".into()));
    }
    for (name, slot) in params.slots.iter_mut() {
        let Some(g) = slot.tensor.take_grad() else {
            continue;
        };
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
        }
        slot.steps += 1;
        let t = slot.steps as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let decay = 1.0 - opt.lr * opt.weight_decay;
        let data = slot.tensor.data_mut();
        for i in 0..data.len() {
            data[i] *= decay;
            slot.m[i] = opt.beta1 * slot.m[i] + (1.0 - opt.beta1) * g[i];
            slot.v[i] = opt.beta2 * slot.v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            data[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    params.steps += 1;
    Ok(())
}
