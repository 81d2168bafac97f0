//! Parameter initialization and gradient-descent optimizers.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::Params;
use rand::Rng;

/// Word vectors not covered by a pretrained file are drawn from U(−0.05, 0.05).
pub const WORD_INIT_RANGE: f64 = 0.05;

/// Xavier/Glorot uniform init: U(−a, a) with a = √(6/(fan_in+fan_out)).
/// Shape must be 2-D (rows = fan_out, cols = fan_in).
pub fn xavier_init<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "xavier_init requires a 2-D shape, got {shape:?}"
        )));
    }
    let (fan_out, fan_in) = (shape[0], shape[1]);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// I.i.d. uniform on [−0.05, 0.05], any shape.
pub fn uniform_init<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-WORD_INIT_RANGE..=WORD_INIT_RANGE))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Decaying learning rate lr₀/(1 + α·p)^β over training progress p ∈ [0,1].
pub fn dynamic_lr(p: f64, lr0: f64, alpha: f64, beta: f64) -> f64 {
    lr0 / (1.0 + alpha * p).powf(beta)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step over every trainable parameter.
pub fn adam_update(state: &mut AdamState, params: &mut Params, lr: f64) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != e.grad.len() {
            return Err(Error::Contract(format!(
                "optimizer state shape mismatch for {}",
                e.name
            )));
        }
        for j in 0..e.grad.len() {
            let g = e.grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            e.value.data[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SgdMomentumState {
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub t: u64,
}

impl SgdMomentumState {
    pub fn new(params: &Params, momentum: f64) -> Self {
        SgdMomentumState {
            velocity: params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect(),
            momentum,
            t: 0,
        }
    }
}

/// v ← momentum·v + g; θ ← θ − lr·v.
pub fn sgd_momentum_update(
    state: &mut SgdMomentumState,
    params: &mut Params,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    for (i, e) in params.entries_mut().iter_mut().enumerate() {
        if !e.trainable {
            continue;
        }
        let vel = &mut state.velocity[i];
        if vel.len() != e.grad.len() {
            return Err(Error::Contract(format!(
                "optimizer state shape mismatch for {}",
                e.name
            )));
        }
        for j in 0..e.grad.len() {
            vel[j] = state.momentum * vel[j] + e.grad[j];
            e.value.data[j] -= lr * vel[j];
        }
    }
    Ok(())
}

/// The two update rules used by the training regimes.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(SgdMomentumState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut Params, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(s) => adam_update(s, params, lr),
            Optimizer::Sgd(s) => sgd_momentum_update(s, params, lr),
        }
    }
}
