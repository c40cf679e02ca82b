//! Bias-corrected Adam over a flat parameter list.

use crate::error::{Error, Result};
use crate::mat::Mat;
use serde::{Deserialize, Serialize};

/// One trainable parameter tensor plus a stable name for checkpoints.
#[derive(Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Flat store of all trainable parameters of a model. Indices into this
/// store are the `ParamId`s bound onto tapes.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.params.push(Param { name: name.into(), value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Mat {
        &self.params[id].value
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Adam moment buffers and step counter.
#[derive(Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let m = params.params.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        let v = params.params.iter().map(|p| Mat::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, t: 0, m, v }
    }

    /// One bias-corrected update. `grads[i]` of `None` means parameter `i`
    /// received no gradient this step (treated as zero: moments still decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Mat>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "adam_step: {} grads vs {} params vs {} moment buffers",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            if let Some(g) = &grads[i] {
                if !g.same_shape(&p.value) {
                    return Err(Error::contract(format!(
                        "adam_step: grad shape mismatch for `{}`",
                        p.name
                    )));
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
