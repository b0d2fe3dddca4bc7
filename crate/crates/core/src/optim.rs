//! Inner-loop optimizers with differentiable update steps, plus a plain
//! flat Adam for the outer (commentary) updates.

use crate::error::{CoreError, Result};
use crate::param::ParamVector;
use crate::tensor::{grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> Result<Self> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(CoreError::InvalidSpec("sgd learning rate must be >= 0".into()));
        }
        Ok(Self { lr })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidSpec(format!("invalid Adam config {self:?}")))
        }
    }
}

/// Adam moment estimates carried on the tape (step count is plain data).
#[derive(Clone)]
pub struct OptState {
    pub step: u64,
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
}

impl OptState {
    /// Zero moments matching the layout of `params`.
    pub fn zeros_like(params: &ParamVector) -> Self {
        let tape = params.tensors[0].tape().clone();
        let m = ParamVector::new(
            params
                .tensors
                .iter()
                .map(|t| tape.zeros(&t.shape()))
                .collect(),
        );
        let v = ParamVector::new(
            params
                .tensors
                .iter()
                .map(|t| tape.zeros(&t.shape()))
                .collect(),
        );
        Self {
            step: 0,
            first_moment: m,
            second_moment: v,
        }
    }
}

/// theta' = theta - lr * dloss/dtheta. With `differentiable`, the result
/// stays connected to everything upstream of the loss (including
/// commentary parameters); otherwise the update is detached.
pub fn sgd_step(
    params: &ParamVector,
    loss: &Tensor,
    config: &SgdConfig,
    differentiable: bool,
) -> Result<ParamVector> {
    let grads = grad(loss, &params.refs(), differentiable)?;
    let mut out = Vec::with_capacity(params.tensors.len());
    for (p, g) in params.tensors.iter().zip(&grads) {
        out.push(p.sub(&g.scale(config.lr))?);
    }
    let updated = ParamVector::new(out);
    Ok(if differentiable {
        updated
    } else {
        updated.detach()
    })
}

/// One bias-corrected Adam update. Moments are carried on the tape when
/// `differentiable` is set.
pub fn adam_step(
    params: &ParamVector,
    state: &OptState,
    loss: &Tensor,
    config: &AdamConfig,
    differentiable: bool,
) -> Result<(ParamVector, OptState)> {
    config.validate()?;
    if state.first_moment.total_dim() != params.total_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: params.total_dim(),
            got: state.first_moment.total_dim(),
        });
    }
    let grads = grad(loss, &params.refs(), differentiable)?;
    let t = state.step + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let mut new_p = Vec::with_capacity(params.tensors.len());
    let mut new_m = Vec::with_capacity(params.tensors.len());
    let mut new_v = Vec::with_capacity(params.tensors.len());
    for ((p, g), (m, v)) in params
        .tensors
        .iter()
        .zip(&grads)
        .zip(state.first_moment.tensors.iter().zip(&state.second_moment.tensors))
    {
        let m1 = m.scale(config.beta1).add(&g.scale(1.0 - config.beta1))?;
        let v1 = v
            .scale(config.beta2)
            .add(&g.mul(g)?.scale(1.0 - config.beta2))?;
        let m_hat = m1.scale(1.0 / bc1);
        let v_hat = v1.scale(1.0 / bc2);
        // The tiny floor keeps sqrt differentiable when a coordinate's
        // gradient history is exactly zero (a dead unit): sqrt'(0) is
        // infinite and would poison hypergradients through the update.
        // The value shift is far below f64 precision of the epsilon term.
        let denom = v_hat.add_scalar(1e-30).sqrt().add_scalar(config.epsilon);
        new_p.push(p.sub(&m_hat.div(&denom)?.scale(config.lr))?);
        new_m.push(m1);
        new_v.push(v1);
    }
    let (params1, m1, v1) = if differentiable {
        (
            ParamVector::new(new_p),
            ParamVector::new(new_m),
            ParamVector::new(new_v),
        )
    } else {
        (
            ParamVector::new(new_p).detach(),
            ParamVector::new(new_m).detach(),
            ParamVector::new(new_v).detach(),
        )
    };
    Ok((
        params1,
        OptState {
            step: t,
            first_moment: m1,
            second_moment: v1,
        },
    ))
}

/// Plain Adam state over flat f64 vectors (no tape).
#[derive(Clone, Debug, PartialEq)]
pub struct FlatAdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlatAdamState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// Non-taped bias-corrected Adam update used for the commentary (outer)
/// parameters, and for plain student training in evaluation runs.
pub fn outer_adam_step(
    params: &[f64],
    gradient: &[f64],
    state: &mut FlatAdamState,
    config: &AdamConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if gradient.len() != params.len() || state.m.len() != params.len() {
        return Err(CoreError::DimensionMismatch {
            expected: params.len(),
            got: gradient.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - config.beta1.powi(state.step as i32);
    let bc2 = 1.0 - config.beta2.powi(state.step as i32);
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let g = gradient[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        out.push(params[i] - config.lr * m_hat / (v_hat.sqrt() + config.epsilon));
    }
    Ok(out)
}

/// Plain flat SGD update.
pub fn flat_sgd_step(params: &[f64], gradient: &[f64], lr: f64) -> Vec<f64> {
    params
        .iter()
        .zip(gradient)
        .map(|(p, g)| p - lr * g)
        .collect()
}
