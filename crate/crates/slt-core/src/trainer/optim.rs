//! Parameter updates: SGD with momentum and Adam, plus global-norm
//! gradient clipping. Frozen and non-trainable parameters are never
//! touched, which keeps frozen groups bit-identical across a stage.

use super::OptimizerKind;
use crate::tensor::{ParamGroup, ParamId, ParamStore};
use ndarray::ArrayD;
use std::collections::BTreeMap;

pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    /// Adam's shared step count, advanced once per [`Optimizer::step`].
    t: i32,
    /// SGD velocity or Adam first moment.
    m: BTreeMap<ParamId, ArrayD<f64>>,
    /// Adam second moment.
    v: BTreeMap<ParamId, ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        Optimizer {
            kind,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Apply one update from the accumulated gradients. `lr_of` supplies
    /// the (already scheduled) rate per parameter group.
    pub fn step(&mut self, store: &mut ParamStore, lr_of: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable || p.frozen {
                continue;
            }
            let lr = lr_of(p.group);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let grad = p.grad.clone();
                    let vel = self
                        .m
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    *vel *= self.momentum;
                    *vel += &grad;
                    let p = store.get_mut(id);
                    p.value.scaled_add(-lr, vel);
                }
                OptimizerKind::Adam => {
                    let grad = p.grad.clone();
                    let m = self
                        .m
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    *m *= self.beta1;
                    m.scaled_add(1.0 - self.beta1, &grad);
                    let v = self
                        .v
                        .entry(id)
                        .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
                    *v *= self.beta2;
                    v.zip_mut_with(&grad, |vv, &g| *vv += (1.0 - self.beta2) * g * g);
                    let mhat_scale = 1.0 / (1.0 - self.beta1.powi(self.t));
                    let vhat_scale = 1.0 / (1.0 - self.beta2.powi(self.t));
                    let update: ArrayD<f64> = {
                        let m = &self.m[&id];
                        let v = &self.v[&id];
                        let mut u = m.clone();
                        u.zip_mut_with(v, |mu, &vv| {
                            *mu = *mu * mhat_scale / ((vv * vhat_scale).sqrt() + self.eps);
                        });
                        u
                    };
                    let p = store.get_mut(id);
                    p.value.scaled_add(-lr, &update);
                }
            }
        }
    }
}

/// Scale all live gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm (NaN or infinity signal a diverged step).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if !p.trainable || p.frozen {
            continue;
        }
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.trainable && !p.frozen {
                p.grad *= scale;
            }
        }
    }
    norm
}
