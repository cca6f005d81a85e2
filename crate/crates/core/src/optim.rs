//! AdamW with two parameter groups: model weights at `lr1` and the
//! per-layer suppression scales at `lr2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ModelState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr1: f64,
    pub lr2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to linear weight matrices only.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr1: 3e-3,
            lr2: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr1 >= 0.0 && self.lr1.is_finite()) || !(self.lr2 >= 0.0 && self.lr2.is_finite())
        {
            return bad("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Model,
    Scale,
}

/// Group of a canonical parameter name.
pub fn group_of(name: &str) -> Group {
    if name.ends_with("sata_scale") {
        Group::Scale
    } else {
        Group::Model
    }
}

/// Whether weight decay applies: linear weights yes; biases, norms, class
/// token, positional embedding, temperatures and scales no.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug)]
struct Slot {
    group: Group,
    decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    step: u64,
    /// Multiplier on both learning rates, for schedules.
    lr_factor: f64,
    clamp_scale: bool,
}

impl AdamW {
    pub fn new(state: &ModelState, cfg: AdamWConfig, clamp_scale: bool) -> Result<Self> {
        cfg.validate()?;
        let slots = state
            .named()
            .into_iter()
            .map(|(name, t)| Slot {
                group: group_of(&name),
                decay: decays(&name),
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
            })
            .collect();
        Ok(Self {
            cfg,
            slots,
            step: 0,
            lr_factor: 1.0,
            clamp_scale,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr_factor(&mut self, factor: f64) {
        self.lr_factor = factor;
    }

    /// One update. `grads` holds one tensor per parameter in canonical order.
    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(Error::dim("adamw", &[self.slots.len()], &[grads.len()]));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut updated = Vec::with_capacity(self.slots.len());
        for ((slot, (_, param)), grad) in self.slots.iter_mut().zip(state.named()).zip(grads) {
            if grad.len() != param.len() {
                return Err(Error::dim("adamw", param.shape(), grad.shape()));
            }
            let lr = self.lr_factor
                * match slot.group {
                    Group::Model => c.lr1,
                    Group::Scale => c.lr2,
                };
            let mut p = param.clone();
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                if slot.decay {
                    *w -= lr * c.weight_decay * *w;
                }
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
                if slot.group == Group::Scale && self.clamp_scale {
                    *w = w.max(0.0);
                }
            }
            updated.push(p);
        }
        *state = state.from_flat(&updated)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping_and_decay_by_name() {
        assert_eq!(group_of("blocks.3.sata_scale"), Group::Scale);
        assert_eq!(group_of("blocks.3.attn.qkv.weight"), Group::Model);
        assert!(decays("head.weight"));
        assert!(decays("blocks.0.mlp.fc1.weight"));
        for n in [
            "pos_embed",
            "cls_token",
            "norm.gain",
            "head.bias",
            "blocks.0.sata_scale",
            "blocks.0.attn.log_temperature",
        ] {
            assert!(!decays(n), "{n}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = AdamWConfig {
            lr1: -1.0,
            ..AdamWConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
    }
}
