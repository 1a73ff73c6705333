//! Layer helpers shared by the generative and discriminative networks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchMoments, Graph, Var};
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Weight of the previous running statistic in the exponential average.
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Glorot-uniform weight matrix `[fan_in, fan_out]`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Running mean and variance of a batch-normalized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        RunningStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Folds a batch into the averages. The batch variance is bias-corrected
    /// before being averaged in.
    pub fn update(&mut self, batch: &BatchMoments) {
        let correction = if batch.count > 1 {
            batch.count as f64 / (batch.count - 1) as f64
        } else {
            1.0
        };
        for j in 0..self.mean.len() {
            self.mean[j] = RUNNING_MOMENTUM * self.mean[j] + (1.0 - RUNNING_MOMENTUM) * batch.mean[j];
            self.var[j] =
                RUNNING_MOMENTUM * self.var[j] + (1.0 - RUNNING_MOMENTUM) * batch.var[j] * correction;
        }
    }
}

/// Batch normalization in either mode. Returns the batch moments in train
/// mode so the caller can fold them into `stats` once the step succeeds.
pub fn batchnorm_forward(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    mode: BatchNormMode,
) -> Result<(Var, Option<BatchMoments>)> {
    match mode {
        BatchNormMode::Train => {
            let (y, m) = g.batchnorm_train(x, gamma, beta)?;
            Ok((y, Some(m)))
        }
        BatchNormMode::Eval => Ok((g.batchnorm_eval(x, gamma, beta, &stats.mean, &stats.var)?, None)),
    }
}
