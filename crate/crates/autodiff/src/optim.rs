//! Optimizers over named parameter gradients.
//!
//! Both optimizers walk the gradient map in name order (it is a `BTreeMap`),
//! so updates are reproducible. Parameters absent from the map — frozen ones,
//! or trainable ones that did not participate in the loss — are left
//! untouched.

use crate::params::ParamStore;
use ndarray::Array2;
use std::collections::BTreeMap;

/// SGD with classic momentum: `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Array2<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name);
            let mut eff = g.clone();
            if self.weight_decay != 0.0 {
                eff.scaled_add(self.weight_decay, p);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.mapv_inplace(|e| e * self.momentum);
            *v += &eff;
            p.scaled_add(-self.lr, v);
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |me, ge| *me = self.beta1 * *me + (1.0 - self.beta1) * ge);
            v.zip_mut_with(g, |ve, ge| *ve = self.beta2 * *ve + (1.0 - self.beta2) * ge * ge);
            let p = store.get_mut(name);
            for ((pe, me), ve) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = me / bc1;
                let vhat = ve / bc2;
                *pe -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pe);
            }
        }
    }
}
