//! Adam and the learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        Adam { ids, v: m.clone(), m, step: 0 }
    }

    /// One bias-corrected update; `grads[i]` belongs to `ids[i]`, with
    /// `None` meaning a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::dim("adam_step", format!("{} gradients for {} parameters", grads.len(), self.ids.len())));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.m[i].shape() {
                    return Err(Error::dim("adam_step", format!("gradient {} vs parameter {}", g.shape(), self.m[i].shape())));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get_mut(self.ids[i]).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Learning rate per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// `base * 0.5 * (1 + cos(pi * epoch / total))`.
    Cosine { base: f64, total: usize },
    /// `base * 2^-floor(epoch / every)`.
    StepHalving { base: f64, every: usize },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Cosine { base, total } => {
                if total == 0 {
                    return base;
                }
                base * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
            }
            LrSchedule::StepHalving { base, every } => base * 0.5f64.powi((epoch / every.max(1)) as i32),
        }
    }

    /// Halving period rescaled from a 1000-epoch, every-200 schedule.
    pub fn scaled_halving(base: f64, epochs: usize) -> Self {
        LrSchedule::StepHalving { base, every: (epochs / 5).max(1) }
    }
}
