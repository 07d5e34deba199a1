//! First-order optimizers operating on a [`ParamStore`].

use crate::nn::{ParamId, ParamStore};
use crate::Gradients;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

/// Adam with bias correction; weight decay is added to the gradient (L2).
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ps: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = ps.ids().map(|id| vec![0.0; ps.get(id).numel()]).collect();
        Adam { cfg, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient; the others are left alone.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = ps.ids().collect();
        for id in ids {
            let p = ps.get(id);
            let Some(g) = grads.get(p) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let updated: Vec<f32> = p
                .data()
                .iter()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &gw), (mi, vi))| {
                    let gw = gw + c.weight_decay * w;
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gw;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gw * gw;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    w - c.lr * mhat / (vhat.sqrt() + c.eps)
                })
                .collect();
            ps.set(id, updated);
        }
    }
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn step(&self, ps: &mut ParamStore, grads: &Gradients) {
        let ids: Vec<ParamId> = ps.ids().collect();
        for id in ids {
            let p = ps.get(id);
            let Some(g) = grads.get(p) else { continue };
            let updated = p.data().iter().zip(g.data()).map(|(&w, &gw)| w - self.lr * gw).collect();
            ps.set(id, updated);
        }
    }
}
