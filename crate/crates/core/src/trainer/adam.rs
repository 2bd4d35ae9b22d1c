//! Bias-corrected Adam.

use crate::error::{CoreError, Result};
use crate::model::{Checkpoint, Grads};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, aligned tensor-for-tensor with the
/// checkpoint's trainable parameters, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<Tensor>>,
    pub v: Vec<Vec<Tensor>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(ckpt: &Checkpoint) -> Self {
        let zeros: Vec<Vec<Tensor>> = ckpt
            .layers()
            .iter()
            .map(|l| l.kind.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam update over every trainable tensor. Moment updates and the
/// parameter step are evaluated in f64 and stored in f32.
pub fn adam_step(
    params: &mut [Vec<Tensor>],
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(CoreError::Diverged {
            epoch: 0,
            step: state.t,
            detail: "non-finite gradient reached the optimizer".into(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (li, layer_params) in params.iter_mut().enumerate() {
        for (ti, p) in layer_params.iter_mut().enumerate() {
            let g = grads.per_layer[li][ti].data();
            let m = state.m[li][ti].data_mut();
            let v = state.v[li][ti].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g64 = gv as f64;
                let m64 = beta1 * (*mv as f64) + (1.0 - beta1) * g64;
                let v64 = beta2 * (*vv as f64) + (1.0 - beta2) * g64 * g64;
                *mv = m64 as f32;
                *vv = v64 as f32;
                let m_hat = m64 / bc1;
                let v_hat = v64 / bc2;
                *pv = ((*pv as f64) - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
    }
    Ok(())
}
