use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Adam moments for one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: BTreeMap<String, Tensor<f32>>,
    second: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    /// Fresh optimizer tracking every parameter of `params`.
    pub fn new(params: &ParamSet<f32>, lr: f32) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &String> {
        self.first.keys()
    }

    /// Applies one update to every tracked parameter. Parameters without a
    /// gradient entry are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>) -> Result<()> {
        for (name, g) in grads.iter() {
            if self.first.contains_key(name) && !g.all_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::powf(self.beta1, t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, t as f32);
        for (name, m) in self.first.iter_mut() {
            let v = self.second.get_mut(name).expect("moment maps share keys");
            let p = params.get_mut(name)?;
            if p.shape() != m.shape() {
                return Err(invalid(alloc::format!("parameter {} changed shape", name)));
            }
            let g = grads.get(name).ok();
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                p.data_mut()[i] -= lr * m_hat / (libm::sqrtf(v_hat) + eps);
            }
        }
        Ok(())
    }

    /// Moments flattened as `<prefix>.m.<param>` / `<prefix>.v.<param>` for checkpointing.
    pub fn export(&self, prefix: &str) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (k, v) in &self.first {
            out.insert(alloc::format!("{}.m.{}", prefix, k), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(alloc::format!("{}.v.{}", prefix, k), v.clone());
        }
        out
    }

    /// Restores moments and step count written by [`Adam::export`].
    pub fn restore(&mut self, prefix: &str, saved: &ParamSet<f32>, step: u64) -> Result<()> {
        let names: Vec<String> = self.first.keys().cloned().collect();
        for k in names {
            let m = saved.get(&alloc::format!("{}.m.{}", prefix, k))?.clone();
            let v = saved.get(&alloc::format!("{}.v.{}", prefix, k))?.clone();
            self.first.insert(k.clone(), m);
            self.second.insert(k, v);
        }
        self.step = step;
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * online` for every tensor of `target`.
pub fn ema_update(target: &mut ParamSet<f32>, online: &ParamSet<f32>, tau: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid(alloc::format!("tau {} outside [0, 1]", tau)));
    }
    let names: Vec<String> = target.names().cloned().collect();
    for name in names {
        let src = online.get(&name)?;
        let dst = target.get_mut(&name)?;
        if src.shape() != dst.shape() {
            return Err(invalid(alloc::format!("shape mismatch for {}", name)));
        }
        if tau == 1.0 {
            dst.data_mut().copy_from_slice(src.data());
            continue;
        }
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = (1.0 - tau) * *d + tau * *s;
        }
    }
    Ok(())
}
