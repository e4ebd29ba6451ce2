//! Plain SGD with optional heavy-ball momentum.

use super::config::{OptimizerKind, TrainConfig};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;
use crate::vit::ViTParams;

#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Option<Vec<Tensor>>,
}

impl Sgd {
    pub fn new(config: &TrainConfig, params: &ViTParams) -> Self {
        let velocity = match config.optimizer {
            OptimizerKind::Sgd => None,
            OptimizerKind::Momentum => Some(
                params
                    .tensors()
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect(),
            ),
        };
        Self {
            momentum: config.momentum,
            velocity,
        }
    }

    /// `v ← μv + g`, `p ← p − lr·v` (or `p ← p − lr·g` without momentum).
    pub fn step(&mut self, params: &mut ViTParams, grads: &[Tensor], lr: f64) -> Result<()> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(dim_err!("{} gradients for {} parameters", grads.len(), tensors.len()));
        }
        for (k, (p, g)) in tensors.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            match self.velocity.as_mut() {
                Some(vel) => {
                    let v = &mut vel[k];
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = self.momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                None => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
        }
        Ok(())
    }
}
