use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named trainable arrays, each with a gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Mat>,
    grads: Vec<Mat>,
    populated: Vec<bool>,
    pub seed: u64,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, store: &ParameterStore, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Handles for externally created leaves (used by gradient checks).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            populated: Vec::new(),
            seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite entries in `{name}`")));
        }
        self.grads.push(Mat::zeros(value.dim()));
        self.populated.push(false);
        self.values.push(value);
        self.names.push(name);
        Ok(())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.position(name).map(move |i| &mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Mat> {
        self.position(name)
            .filter(|&i| self.populated[i])
            .map(|i| &self.grads[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().flat_map(|v| v.iter()).map(|x| x * x).sum()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.input(v.clone())).collect(),
        }
    }

    /// Puts every parameter on the tape as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for (g, p) in self.grads.iter_mut().zip(&mut self.populated) {
            g.fill(0.0);
            *p = false;
        }
    }

    /// Adds `scale * dL/dparam` into the gradient slots. Every slot counts as
    /// populated afterwards, including parameters the root does not use.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for ((slot, flag), &v) in self.grads.iter_mut().zip(&mut self.populated).zip(&bound.vars) {
            if let Some(g) = grads.get_ref(v) {
                slot.scaled_add(scale, g);
            }
            *flag = true;
        }
    }

    pub(crate) fn grads_if_populated(&self) -> Result<&[Mat]> {
        match self.populated.iter().position(|p| !p) {
            Some(i) => Err(Error::MissingGradient(self.names[i].clone())),
            None => Ok(&self.grads),
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Mat) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        if grad.dim() != self.values[i].dim() {
            return Err(Error::Dimension(format!("gradient shape for `{name}`")));
        }
        self.grads[i] = grad;
        self.populated[i] = true;
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    glorot_fans(rows, cols, rows, cols, rng)
}

pub fn glorot_fans(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit))
}

/// Standard normal entries rescaled to unit norm (`len x 1`).
pub fn unit_projection(len: usize, rng: &mut Rng) -> Mat {
    loop {
        let v = Array2::from_shape_fn((len, 1), |_| StandardNormal.sample(rng));
        let norm = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_store(store: &ParameterStore) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|v| Mat::zeros(v.dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(store: &mut ParameterStore, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Dimension("optimizer state does not match store".into()));
    }
    let grads = store.grads_if_populated()?.to_vec();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in store
        .values
        .iter_mut()
        .zip(&grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
