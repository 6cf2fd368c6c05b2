use super::checkpoint::{Checkpoint, NamedTensor};
use super::params::ParamStore;
use crate::error::{Error, Result};
use candle_core::backprop::GradStore;
use candle_core::Tensor;

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias correction. Moments are kept per trainable tensor in
/// store order so they can be checkpointed next to the parameters.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let zeros = store
            .trainable()
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?.detach()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched but their moments still decay.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (_, var)) in store.trainable().iter().enumerate() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?.detach(),
            };
            let m = ((&self.first[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.second[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let new = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&new)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn export(&self, store: &ParamStore, ckpt: &mut Checkpoint) -> Result<()> {
        for (i, (name, _)) in store.trainable().iter().enumerate() {
            ckpt.set_tensor(NamedTensor::from_tensor(&format!("adam.m.{name}"), &self.first[i])?);
            ckpt.set_tensor(NamedTensor::from_tensor(&format!("adam.v.{name}"), &self.second[i])?);
        }
        ckpt.meta.retain(|(k, _)| k != "adam.step");
        ckpt.meta.push(("adam.step".into(), self.step.to_string()));
        Ok(())
    }

    pub fn import(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        let dev = store.device();
        for (i, (name, var)) in store.trainable().iter().enumerate() {
            for (slot, kind) in [(&mut self.first[i], "m"), (&mut self.second[i], "v")] {
                let key = format!("adam.{kind}.{name}");
                let nt = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state `{key}`")))?;
                *slot = nt.to_tensor(dev, var.dtype())?;
            }
        }
        self.step = ckpt
            .meta("adam.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?;
        Ok(())
    }
}
