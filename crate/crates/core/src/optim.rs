//! Adam and the cosine learning-rate schedule.

use rayon::prelude::*;

use crate::autodiff::{Tape, TapeTensor};
use crate::error::Result;
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// `lr_min + (lr_init - lr_min) * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(lr_init: f64, lr_min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_init;
    }
    let t = (epoch.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Mean loss and mean gradient over `items`, one tape per item.
///
/// Items are processed in parallel but reduced in input order, so the
/// result does not depend on the thread count.
pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], loss_fn: F) -> Result<(f64, GradStore)>
where
    T: Sync,
    F: for<'t> Fn(&'t Tape, &ParamStore, &T) -> Result<TapeTensor<'t>> + Sync,
{
    let per_item: Vec<Result<(f64, GradStore)>> = items
        .par_iter()
        .map(|item| {
            let tape = Tape::new();
            let loss = loss_fn(&tape, store, item)?;
            let mut g = GradStore::zeros_like(store);
            let value = loss.item();
            tape.backward(loss)?.accumulate_into(&mut g);
            Ok((value, g))
        })
        .collect();
    let mut total = GradStore::zeros_like(store);
    let mut loss = 0.0;
    for r in per_item {
        let (l, g) = r?;
        loss += l;
        total.merge(&g);
    }
    let n = items.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}
