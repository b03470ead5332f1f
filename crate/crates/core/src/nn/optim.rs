use std::collections::BTreeMap;

use super::params::{Grads, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates exactly the parameters that have a gradient entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.param_mut(name)?;
            p.check_same_shape(g)?;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}
