//! Gradient-descent optimizers over a [`ParamSet`].

use crate::numerics::Matrix;
use crate::params::{Group, ParamSet};

/// Plain gradient descent, optionally with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: Option<f64>,
    velocity: Vec<Option<Matrix>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: Option<f64>) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamSet, grads: &[Option<Matrix>]) {
        if self.lr == 0.0 {
            return;
        }
        self.velocity.resize(store.len(), None);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            let update = match self.momentum {
                Some(mu) => {
                    let v = self.velocity[id.index()].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
                    for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = mu * *vv + gv;
                    }
                    v.clone()
                }
                None => g.clone(),
            };
            let p = store.get_mut(id);
            for (pv, u) in p.data_mut().iter_mut().zip(update.data()) {
                *pv -= self.lr * u;
            }
        }
    }
}

/// Adam with decoupled weight decay. Decay is skipped for single-row
/// parameters (biases, norm scales).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.01)
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; parameters whose group has a zero learning rate
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamSet, grads: &[Option<Matrix>], lr_for: impl Fn(Group) -> f64) {
        self.step += 1;
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let lr = lr_for(store.entry(id).group);
            if lr == 0.0 {
                continue;
            }
            let Some(g) = &grads[id.index()] else { continue };
            let (rows, cols) = g.shape();
            let m = self.m[id.index()].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let v = self.v[id.index()].get_or_insert_with(|| Matrix::zeros(rows, cols));
            let decay = if rows > 1 { self.weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *pv);
            }
        }
    }
}
