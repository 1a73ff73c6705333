//! Per-trial results of the semi-supervised experiment.

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub arm: String,
    pub labeled: usize,
    pub error_rate: f64,
    pub log_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub trials: usize,
    pub mean_error: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub trials: Vec<TrialResult>,
    pub summaries: Vec<ArmSummary>,
    pub final_components: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl ExperimentReport {
    /// Summaries per arm, in order of first appearance.
    pub fn new(trials: Vec<TrialResult>, final_components: usize) -> Self {
        let mut arms: Vec<String> = Vec::new();
        for t in &trials {
            if !arms.contains(&t.arm) {
                arms.push(t.arm.clone());
            }
        }
        let summaries = arms
            .into_iter()
            .map(|arm| {
                let errs: Vec<f64> = trials.iter().filter(|t| t.arm == arm).map(|t| t.error_rate).collect();
                let (mean_error, std_error) = mean_std(&errs);
                ArmSummary {
                    arm,
                    trials: errs.len(),
                    mean_error,
                    std_error,
                }
            })
            .collect();
        ExperimentReport {
            trials,
            summaries,
            final_components,
        }
    }

    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }
}
