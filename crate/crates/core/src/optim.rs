//! Adam with bias correction, plus L2 weight decay folded into gradients.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            config,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.m[i]) {
            return Err(shape_err(
                "adam_step",
                format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            md[k] = beta1 * md[k] + (1.0 - beta1) * gk;
            vd[k] = beta2 * vd[k] + (1.0 - beta2) * gk * gk;
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adds `coefficient * param` to the gradient of every parameter whose mask
/// entry is true.
pub fn apply_weight_decay(
    params: &[Tensor],
    grads: &mut [Tensor],
    coefficient: f64,
    mask: &[bool],
) -> Result<()> {
    if coefficient < 0.0 {
        return Err(invalid(format!("weight decay must be >= 0, got {coefficient}")));
    }
    if params.len() != grads.len() || params.len() != mask.len() {
        return Err(shape_err("weight_decay", "params, grads and mask differ in length"));
    }
    if coefficient == 0.0 {
        return Ok(());
    }
    for ((p, g), &on) in params.iter().zip(grads.iter_mut()).zip(mask) {
        if on {
            for (gk, pk) in g.data_mut().iter_mut().zip(p.data()) {
                *gk += coefficient * pk;
            }
        }
    }
    Ok(())
}
