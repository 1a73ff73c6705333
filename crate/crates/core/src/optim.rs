//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Bias-corrected Adam moments, one pair per tracked parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            learning_rate,
            t: 0,
            m,
            v,
        }
    }

    /// Zeroes the moments and step counter.
    pub fn reset(&mut self) {
        self.t = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().fill(0.0);
        }
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let lr = self.learning_rate;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit (possibly negative) learning rate.
    pub fn step_with_lr(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check_conformant(params, grads)?;
        if params.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![self.m.len()],
            });
        }
        for (p, m) in params.iter().zip(&self.m) {
            p.expect_same_shape(m, "adam_step")?;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// `params ← params − lr · grads`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], learning_rate: f64) -> Result<()> {
    check_conformant(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *pi -= learning_rate * gi;
        }
    }
    Ok(())
}

fn check_conformant(params: &[Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "optimizer",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_same_shape(g, "optimizer")?;
    }
    Ok(())
}
