use super::model::{Model, ParamId};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Split of the model parameters into the set updated at test time (norm
/// affines of the non-frozen layers) and everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPartition {
    pub adaptable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
    pub freeze_top_k: usize,
}

/// Norm affines are adaptable except for the last `freeze_top_k` norm layers.
pub fn adaptable_params(model: &Model, freeze_top_k: usize) -> Result<ParamPartition> {
    let layers = model.norm_layer_count();
    if freeze_top_k > layers {
        return Err(Error::contract(format!(
            "freeze_top_k = {freeze_top_k} exceeds the {layers} norm layers"
        )));
    }
    let adaptable: Vec<ParamId> = (0..layers - freeze_top_k)
        .flat_map(|i| {
            let (g, b) = model.norm_affine(i);
            [g, b]
        })
        .collect();
    let frozen = model.param_ids().filter(|id| !adaptable.contains(id)).collect();
    Ok(ParamPartition {
        adaptable,
        frozen,
        freeze_top_k,
    })
}

impl ParamPartition {
    /// Every parameter trainable; used for source training.
    pub fn all(model: &Model) -> Self {
        Self {
            adaptable: model.param_ids().collect(),
            frozen: Vec::new(),
            freeze_top_k: 0,
        }
    }

    pub fn numel(&self, model: &Model) -> usize {
        self.adaptable.iter().map(|&id| model.param(id).numel()).sum()
    }
}

/// SGD with heavy-ball momentum: `v ← m·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, model: &Model, params: &[ParamId]) -> Self {
        let velocity = params.iter().map(|&id| Tensor::zeros(model.param(id).shape())).collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(|v| v.data_mut().fill(0.0));
    }

    pub fn step(&mut self, model: &mut Model, params: &[ParamId], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "sgd step: {} params, {} grads, {} velocity slots",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((&id, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if g.shape() != model.param(id).shape() || v.shape() != g.shape() {
                return Err(Error::shape("sgd_step", model.param(id).shape(), g.shape()));
            }
        }
        for ((&id, g), v) in params.iter().zip(grads).zip(self.velocity.iter_mut()) {
            let theta = model.param_mut(id);
            for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *t -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// One SGD step on the adaptable parameters of `partition`.
pub fn sgd_step(
    state: &mut SgdState,
    model: &mut Model,
    partition: &ParamPartition,
    grads: &[Tensor],
) -> Result<()> {
    state.step(model, &partition.adaptable, grads)
}
