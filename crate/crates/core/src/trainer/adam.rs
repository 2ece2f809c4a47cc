use ndarray::Zip;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::nethead::{param_group, HeadParameters, ParamGroup};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one head, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: HeadParameters,
    pub second: HeadParameters,
}

impl AdamState {
    pub fn new(like: &HeadParameters) -> Self {
        Self {
            step: 0,
            first: like.zeros_like(),
            second: like.zeros_like(),
        }
    }
}

/// Learning rates per parameter group and the L2 penalty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamSettings {
    pub lr_encoder: f64,
    pub lr_fc: f64,
    pub weight_decay: f64,
}

impl AdamSettings {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Classifier => self.lr_fc,
        }
    }
}

/// One bias-corrected Adam step on a single tensor. Weight decay is the
/// classical L2 form, folded into the gradient before the moment updates.
/// `t` is the 1-based step index.
pub fn adam_step(param: &mut Mat, grad: &Mat, first: &mut Mat, second: &mut Mat, t: u64, lr: f64, weight_decay: f64) -> Result<()> {
    if param.dim() != grad.dim() || param.dim() != first.dim() || param.dim() != second.dim() {
        return Err(Error::DimensionMismatch(format!(
            "adam: parameter {:?}, gradient {:?}, moments {:?}/{:?}",
            param.dim(),
            grad.dim(),
            first.dim(),
            second.dim()
        )));
    }
    let bc1 = 1.0 - ADAM_BETA1.powf(t as f64);
    let bc2 = 1.0 - ADAM_BETA2.powf(t as f64);
    Zip::from(param)
        .and(grad)
        .and(first)
        .and(second)
        .for_each(|p, &g, m, v| {
            let g = g + weight_decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
    Ok(())
}

/// Adam update of every tensor of a head, with per-group learning rates.
pub fn adam_update(params: &mut HeadParameters, grads: &HeadParameters, state: &mut AdamState, settings: &AdamSettings) -> Result<()> {
    let n = params.tensors().len();
    if grads.tensors().len() != n {
        return Err(Error::DimensionMismatch("adam: gradient layout differs".into()));
    }
    state.step += 1;
    let t = state.step;
    let firsts = state.first.tensors_mut();
    let seconds = state.second.tensors_mut();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        adam_step(
            p,
            &grads.tensors()[i],
            &mut firsts[i],
            &mut seconds[i],
            t,
            settings.lr(param_group(i)),
            settings.weight_decay,
        )?;
    }
    Ok(())
}
