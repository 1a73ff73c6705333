//! Mixture-of-experts classifier gated by mixture responsibilities.
//!
//! A shared trunk `act(BN(W x + b))` feeds one softmax head per mixture
//! component. Predictions are `Σ_c softmax_c(x) · r_c(x)` with `r` the
//! generative responsibilities. Training minimizes the
//! responsibility-weighted log loss with `r` held fixed.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BatchMoments, Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mixture::{argmax, MixtureState};
use crate::nn::{batchnorm_forward, glorot_uniform, BatchNormMode, RunningStats};
use crate::optim::{sgd_step, AdamState, OptimizerKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vae::VaeModel;

const TRUNK_W: usize = 0;
const TRUNK_B: usize = 1;
const TRUNK_GAMMA: usize = 2;
const TRUNK_BETA: usize = 3;
const EXPERTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Start every expert from the same head weights.
    pub tied_init: bool,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl MoeConfig {
    pub fn new(hidden_dim: usize, n_classes: usize) -> Self {
        MoeConfig {
            hidden_dim,
            n_classes,
            activation: Activation::Tanh,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 500,
            tied_init: true,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_classes < 2 || self.batch_size == 0 {
            return Err(Error::Config(
                "classifier needs hidden_dim ≥ 1, n_classes ≥ 2 and batch_size ≥ 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    config: MoeConfig,
    input_dim: usize,
    n_experts: usize,
    /// Trunk tensors followed by `(W_c, b_c)` per expert.
    params: Vec<Tensor>,
    stats: RunningStats,
    adam: AdamState,
}

impl MoeModel {
    /// Glorot trunk and heads.
    pub fn new_random(input_dim: usize, n_experts: usize, config: MoeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let trunk = [
            glorot_uniform(input_dim, h, rng),
            Tensor::zeros(&[h]),
            Tensor::ones(&[h]),
            Tensor::zeros(&[h]),
        ];
        Self::with_trunk(input_dim, n_experts, config, trunk, RunningStats::new(h), rng)
    }

    /// Trunk copied from the encoder hidden layer of `base`; heads drawn
    /// from `rng`. The hidden width and activation follow `base`.
    pub fn from_encoder(base: &VaeModel, n_experts: usize, mut config: MoeConfig, rng: &mut RngStream) -> Result<Self> {
        config.hidden_dim = base.config().hidden_dim;
        config.activation = base.config().architecture.activation();
        let trunk = base.encoder_trunk().map(Tensor::clone);
        Self::with_trunk(
            base.config().input_dim,
            n_experts,
            config,
            trunk,
            base.encoder_stats().clone(),
            rng,
        )
    }

    fn with_trunk(
        input_dim: usize,
        n_experts: usize,
        config: MoeConfig,
        trunk: [Tensor; 4],
        stats: RunningStats,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        if n_experts == 0 {
            return Err(Error::Config("need at least one expert".into()));
        }
        let (h, k) = (config.hidden_dim, config.n_classes);
        let mut params: Vec<Tensor> = trunk.into();
        let shared = glorot_uniform(h, k, rng);
        for _ in 0..n_experts {
            let w = if config.tied_init {
                shared.clone()
            } else {
                glorot_uniform(h, k, rng)
            };
            params.push(w);
            params.push(Tensor::zeros(&[k]));
        }
        let adam = AdamState::new(&params, config.learning_rate);
        Ok(MoeModel {
            config,
            input_dim,
            n_experts,
            params,
            stats,
            adam,
        })
    }

    pub fn from_parts(
        config: MoeConfig,
        input_dim: usize,
        n_experts: usize,
        params: Vec<Tensor>,
        stats: RunningStats,
        adam: AdamState,
    ) -> Result<Self> {
        config.validate()?;
        let (h, k) = (config.hidden_dim, config.n_classes);
        let mut shapes = vec![vec![input_dim, h], vec![h], vec![h], vec![h]];
        for _ in 0..n_experts {
            shapes.push(vec![h, k]);
            shapes.push(vec![k]);
        }
        if params.len() != shapes.len() || adam.m.len() != shapes.len() || adam.v.len() != shapes.len() {
            return Err(Error::Input(format!(
                "expected {} classifier tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((p, s), (m, v)) in params.iter().zip(&shapes).zip(adam.m.iter().zip(&adam.v)) {
            for t in [p, m, v] {
                if t.shape() != s.as_slice() {
                    return Err(Error::Shape {
                        op: "classifier parameters",
                        lhs: s.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        if stats.mean.len() != h || stats.var.len() != h {
            return Err(Error::Input("trunk statistics have the wrong width".into()));
        }
        Ok(MoeModel {
            config,
            input_dim,
            n_experts,
            params,
            stats,
            adam,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn trunk_stats(&self) -> &RunningStats {
        &self.stats
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.adam
    }

    /// Head `(W, b)` of expert `c`.
    pub fn expert(&self, c: usize) -> (&Tensor, &Tensor) {
        (&self.params[EXPERTS + 2 * c], &self.params[EXPERTS + 2 * c + 1])
    }

    /// Parameter names in slot order, for serialization.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["trunk.w", "trunk.b", "trunk.gamma", "trunk.beta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for c in 0..self.n_experts {
            names.push(format!("expert{c}.w"));
            names.push(format!("expert{c}.b"));
        }
        names
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, d) = x.expect_matrix("classifier input")?;
        if d != self.input_dim {
            return Err(Error::Shape {
                op: "classifier input",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.input_dim],
            });
        }
        Ok(n)
    }

    /// Per-expert log-probabilities `[n, K]`.
    fn graph(&self, g: &mut Graph, p: &[Var], x: &Tensor, mode: BatchNormMode) -> Result<(Vec<Var>, Option<BatchMoments>)> {
        let xc = g.constant(x.clone());
        let h = g.affine(xc, p[TRUNK_W], p[TRUNK_B])?;
        let (h, moments) = batchnorm_forward(g, h, p[TRUNK_GAMMA], p[TRUNK_BETA], &self.stats, mode)?;
        let h = g.activation(h, self.config.activation);
        let logp = (0..self.n_experts)
            .map(|c| {
                let logits = g.affine(h, p[EXPERTS + 2 * c], p[EXPERTS + 2 * c + 1])?;
                g.log_softmax(logits)
            })
            .collect::<Result<_>>()?;
        Ok((logp, moments))
    }

    /// Each expert's class distribution `[n, K]`, using running statistics.
    pub fn expert_probs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let (logp, _) = self.graph(&mut g, &p, x, BatchNormMode::Eval)?;
        Ok(logp.into_iter().map(|v| g.value(v).map(f64::exp)).collect())
    }

    /// `Σ_c weights[i][c] · expert_c(x_i)`.
    pub fn predict_with_weights(&self, x: &Tensor, weights: &[Vec<f64>]) -> Result<Tensor> {
        let n = self.check_input(x)?;
        self.check_weights(n, weights)?;
        let experts = self.expert_probs(x)?;
        let k = self.config.n_classes;
        let mut out = vec![0.0; n * k];
        for (c, probs) in experts.iter().enumerate() {
            for (i, (o, pr)) in out.chunks_exact_mut(k).zip(probs.data().chunks_exact(k)).enumerate() {
                for (a, &v) in o.iter_mut().zip(pr) {
                    *a += weights[i][c] * v;
                }
            }
        }
        Tensor::new(vec![n, k], out)
    }

    /// Gated prediction with the mixture's noise-free responsibilities.
    pub fn predict(&self, mixture: &MixtureState, x: &Tensor) -> Result<Tensor> {
        self.expect_aligned(mixture)?;
        let r = mixture.responsibilities_at_mean(x)?;
        self.predict_with_weights(x, &r)
    }

    fn expect_aligned(&self, mixture: &MixtureState) -> Result<()> {
        if mixture.n_components() != self.n_experts {
            return Err(Error::Input(format!(
                "{} experts but {} mixture components",
                self.n_experts,
                mixture.n_components()
            )));
        }
        Ok(())
    }

    fn check_weights(&self, n: usize, weights: &[Vec<f64>]) -> Result<()> {
        if weights.len() != n || weights.iter().any(|w| w.len() != self.n_experts) {
            return Err(Error::Shape {
                op: "gating weights",
                lhs: vec![n, self.n_experts],
                rhs: vec![weights.len(), weights.first().map_or(0, Vec::len)],
            });
        }
        Ok(())
    }

    /// Mean over rows of `Σ_c w_ic · (−log p_c(y_i | x_i))` and its gradient.
    pub fn loss_and_gradients(&self, x: &Tensor, y: &[usize], weights: &[Vec<f64>]) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads, _) = self.loss_inner(x, y, weights)?;
        Ok((loss, grads))
    }

    fn loss_inner(
        &self,
        x: &Tensor,
        y: &[usize],
        weights: &[Vec<f64>],
    ) -> Result<(f64, Vec<Tensor>, Option<BatchMoments>)> {
        let n = self.check_input(x)?;
        self.check_weights(n, weights)?;
        let k = self.config.n_classes;
        if y.len() != n {
            return Err(Error::Input(format!("{} labels for {n} rows", y.len())));
        }
        if let Some(bad) = y.iter().find(|&&c| c >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mode = if n >= 2 { BatchNormMode::Train } else { BatchNormMode::Eval };
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let (logp, moments) = self.graph(&mut g, &p, x, mode)?;
        let mut onehot = vec![0.0; n * k];
        for (i, &c) in y.iter().enumerate() {
            onehot[i * k + c] = 1.0;
        }
        let onehot = g.constant(Tensor::new(vec![n, k], onehot)?);
        let mut total: Option<Var> = None;
        for (c, &lp) in logp.iter().enumerate() {
            let picked = g.mul(lp, onehot)?;
            let picked = g.sum_rows(picked)?;
            let w = g.constant(Tensor::new(vec![n], weights.iter().map(|r| r[c]).collect())?);
            let term = g.mul(picked, w)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        let total = total.expect("at least one expert");
        let mean = g.mean(total);
        let loss = g.scale(mean, -1.0);
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let grads = p.iter().map(|&v| grads.take(v)).collect();
        Ok((value, grads, moments))
    }

    /// Trains against the mixture's responsibilities, which must form a
    /// distribution per row. Returns the mean loss of every epoch.
    pub fn train(&mut self, mixture: &MixtureState, x: &Tensor, y: &[usize], rng: &mut RngStream) -> Result<Vec<f64>> {
        self.expect_aligned(mixture)?;
        let r = mixture.responsibilities_at_mean(x)?;
        self.train_weighted(x, y, &r, rng)
    }

    /// Training with explicit gating weights that must sum to one per row.
    pub fn train_weighted(&mut self, x: &Tensor, y: &[usize], weights: &[Vec<f64>], rng: &mut RngStream) -> Result<Vec<f64>> {
        for (i, w) in weights.iter().enumerate() {
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 || w.iter().any(|&v| v < 0.0) {
                return Err(Error::Input(format!("gating weights of row {i} sum to {s}, not 1")));
            }
        }
        self.train_with_weights(x, y, weights, rng)
    }

    /// Training with arbitrary non-negative weights.
    pub(crate) fn train_with_weights(
        &mut self,
        x: &Tensor,
        y: &[usize],
        weights: &[Vec<f64>],
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        let n = self.check_input(x)?;
        if n == 0 {
            return Err(Error::Empty("classifier training"));
        }
        let mut curve = Vec::with_capacity(self.config.epochs);
        let mut step = 0;
        for _ in 0..self.config.epochs {
            let order = rng.permutation(n);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(self.config.batch_size) {
                let xb = x.select_rows(batch)?;
                let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                let wb: Vec<Vec<f64>> = batch.iter().map(|&i| weights[i].clone()).collect();
                let (loss, grads, moments) = self.loss_inner(&xb, &yb, &wb)?;
                if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite {
                        value: loss,
                        batch: step,
                        component: None,
                    });
                }
                match self.config.optimizer {
                    OptimizerKind::Adam => self.adam.step(&mut self.params, &grads)?,
                    OptimizerKind::Sgd => sgd_step(&mut self.params, &grads, self.config.learning_rate)?,
                }
                if let Some(m) = moments {
                    self.stats.update(&m);
                }
                epoch_loss += loss * batch.len() as f64;
                step += 1;
            }
            curve.push(epoch_loss / n as f64);
        }
        Ok(curve)
    }
}

/// Single softmax head on the same trunk, trained with unit weights: a
/// one-expert [`MoeModel`].
pub fn baseline_train(
    model: MoeModel,
    x: &Tensor,
    y: &[usize],
    rng: &mut RngStream,
) -> Result<(MoeModel, Vec<f64>)> {
    if model.n_experts() != 1 {
        return Err(Error::Config("baseline classifier has exactly one head".into()));
    }
    let mut model = model;
    let weights = vec![vec![1.0]; x.rows()];
    let curve = model.train_weighted(x, y, &weights, rng)?;
    Ok((model, curve))
}

/// Classification summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub log_loss: f64,
}

/// Scores predicted distributions `[n, K]` against labels. Ties in the
/// argmax go to the lowest class index.
pub fn evaluate_probs(probs: &Tensor, y: &[usize]) -> Result<EvalReport> {
    let (n, k) = probs.expect_matrix("evaluate")?;
    if y.len() != n || n == 0 {
        return Err(Error::Input(format!("{} labels for {n} predictions", y.len())));
    }
    let mut correct = vec![0usize; k];
    let mut total = vec![0usize; k];
    let (mut errors, mut log_loss) = (0usize, 0.0);
    for (row, &label) in probs.data().chunks_exact(k).zip(y) {
        if label >= k {
            return Err(Error::Input(format!("label {label} out of range for {k} classes")));
        }
        let pred = argmax(row).expect("k ≥ 1");
        total[label] += 1;
        if pred == label {
            correct[label] += 1;
        } else {
            errors += 1;
        }
        log_loss -= row[label].max(1e-15).ln();
    }
    Ok(EvalReport {
        error_rate: errors as f64 / n as f64,
        per_class_accuracy: correct
            .iter()
            .zip(&total)
            .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
            .collect(),
        log_loss: log_loss / n as f64,
    })
}

pub fn evaluate(model: &MoeModel, mixture: &MixtureState, test: &Dataset) -> Result<EvalReport> {
    let (y, _) = test.require_labels("evaluation")?;
    evaluate_probs(&model.predict(mixture, test.instances())?, y)
}

/// Baseline evaluation: unit gating on the single head.
pub fn evaluate_baseline(model: &MoeModel, test: &Dataset) -> Result<EvalReport> {
    let (y, _) = test.require_labels("evaluation")?;
    let w = vec![vec![1.0]; test.len()];
    evaluate_probs(&model.predict_with_weights(test.instances(), &w)?, y)
}

/// `concat_c r_c · (μ_c, σ_c)` with noise-free responsibilities:
/// `C · 2 · latent_dim` columns.
pub fn mixture_features(mixture: &MixtureState, x: &Tensor) -> Result<Tensor> {
    let r = mixture.responsibilities_at_mean(x)?;
    let k = mixture.base().config().latent_dim;
    let c_count = mixture.n_components();
    let width = c_count * 2 * k;
    let mut out = vec![0.0; x.rows() * width];
    for (c, comp) in mixture.components().iter().enumerate() {
        let q = comp.model.encode(x)?;
        for i in 0..x.rows() {
            let dst = &mut out[i * width + c * 2 * k..i * width + (c + 1) * 2 * k];
            for j in 0..k {
                dst[j] = r[i][c] * q.mu.row(i)[j];
                dst[k + j] = r[i][c] * q.sigma.row(i)[j];
            }
        }
    }
    Tensor::new(vec![x.rows(), width], out)
}

/// `(μ, σ)` of one VAE: `2 · latent_dim` columns.
pub fn vae_features(vae: &VaeModel, x: &Tensor) -> Result<Tensor> {
    let q = vae.encode(x)?;
    let k = q.mu.cols();
    let mut out = Vec::with_capacity(x.rows() * 2 * k);
    for i in 0..x.rows() {
        out.extend_from_slice(q.mu.row(i));
        out.extend_from_slice(q.sigma.row(i));
    }
    Tensor::new(vec![x.rows(), 2 * k], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Stop when the full-batch loss improves by less than this.
    pub tolerance: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            learning_rate: 0.01,
            max_iterations: 3000,
            tolerance: 1e-9,
        }
    }
}

/// Multinomial logistic regression from zero weights, trained full-batch
/// with Adam; returns test accuracy.
pub fn logistic_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_classes: usize,
    options: &ProbeOptions,
) -> Result<f64> {
    let (n, d) = train_x.expect_matrix("probe features")?;
    if train_y.len() != n || n == 0 {
        return Err(Error::Input("probe needs one label per training row".into()));
    }
    if test_x.cols() != d {
        return Err(Error::Shape {
            op: "probe features",
            lhs: vec![n, d],
            rhs: test_x.shape().to_vec(),
        });
    }
    let mut onehot = vec![0.0; n * n_classes];
    for (i, &c) in train_y.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::Input(format!("label {c} out of range")));
        }
        onehot[i * n_classes + c] = 1.0;
    }
    let onehot = Tensor::new(vec![n, n_classes], onehot)?;
    let mut params = vec![Tensor::zeros(&[d, n_classes]), Tensor::zeros(&[n_classes])];
    let mut adam = AdamState::new(&params, options.learning_rate);
    let mut prev = f64::INFINITY;
    for _ in 0..options.max_iterations {
        let mut g = Graph::new();
        let w = g.param(params[0].clone());
        let b = g.param(params[1].clone());
        let xc = g.constant(train_x.clone());
        let logits = g.affine(xc, w, b)?;
        let lp = g.log_softmax(logits)?;
        let oh = g.constant(onehot.clone());
        let picked = g.mul(lp, oh)?;
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0 / n as f64);
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        adam.step(&mut params, &[grads.take(w), grads.take(b)])?;
        if (prev - value).abs() < options.tolerance {
            break;
        }
        prev = value;
    }
    let logits = test_x.matmul(&params[0])?;
    let mut correct = 0;
    for (row, &y) in logits.data().chunks_exact(n_classes).zip(test_y) {
        let scores: Vec<f64> = row.iter().zip(params[1].data()).map(|(a, b)| a + b).collect();
        if argmax(&scores) == Some(y) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len().max(1) as f64)
}

/// Probe accuracy on mixture features.
pub fn linear_probe(mixture: &MixtureState, labeled: &Dataset, test: &Dataset, options: &ProbeOptions) -> Result<f64> {
    let (ly, k) = labeled.require_labels("linear probe")?;
    let (ty, _) = test.require_labels("linear probe")?;
    let ftrain = mixture_features(mixture, labeled.instances())?;
    let ftest = mixture_features(mixture, test.instances())?;
    logistic_probe(&ftrain, ly, &ftest, ty, k, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize) -> MoeConfig {
        MoeConfig {
            epochs: 2,
            ..MoeConfig::new(5, k)
        }
    }

    fn toy(rng: &mut RngStream) -> (Tensor, Vec<usize>) {
        // Two linearly separable blobs.
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![centre + 0.3 * rng.normal(), 0.3 * rng.normal(), centre + 0.3 * rng.normal()]);
            y.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), y)
    }

    fn uniform(n: usize, c: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / c as f64; c]; n]
    }

    #[test]
    fn predictions_are_distributions() {
        let mut rng = RngStream::new(1, 1);
        let m = MoeModel::new_random(3, 3, MoeConfig { tied_init: false, ..cfg(4) }, &mut rng).unwrap();
        let x = rng.normal_tensor(&[25, 3]);
        let w: Vec<Vec<f64>> = (0..25)
            .map(|_| crate::tensor::softmax(&[rng.normal(), rng.normal(), rng.normal()]).unwrap())
            .collect();
        let p = m.predict_with_weights(&x, &w).unwrap();
        for row in p.data().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        for e in m.expert_probs(&x).unwrap() {
            for row in e.data().chunks_exact(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_experts_ignore_gating() {
        let mut rng = RngStream::new(2, 1);
        let m = MoeModel::new_random(3, 3, cfg(2), &mut rng).unwrap();
        let x = rng.normal_tensor(&[6, 3]);
        let single = &m.expert_probs(&x).unwrap()[0];
        let w: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64 / 6.0, 0.5, 0.5 - 0.1 * i as f64 / 6.0]).collect();
        let p = m.predict_with_weights(&x, &w).unwrap();
        for (a, b) in p.data().iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_invariant_to_expert_permutation() {
        let mut rng = RngStream::new(12, 1);
        let m = MoeModel::new_random(3, 3, MoeConfig { tied_init: false, ..cfg(3) }, &mut rng).unwrap();
        let x = rng.normal_tensor(&[10, 3]);
        let w: Vec<Vec<f64>> = (0..10)
            .map(|_| crate::tensor::softmax(&[rng.normal(), rng.normal(), rng.normal()]).unwrap())
            .collect();
        let perm = [2usize, 0, 1];
        let mut params = m.params()[..EXPERTS].to_vec();
        for &c in &perm {
            let (pw, pb) = m.expert(c);
            params.push(pw.clone());
            params.push(pb.clone());
        }
        let adam = AdamState::new(&params, 0.01);
        let permuted =
            MoeModel::from_parts(m.config().clone(), 3, 3, params, m.trunk_stats().clone(), adam).unwrap();
        let pw: Vec<Vec<f64>> = w.iter().map(|r| perm.iter().map(|&c| r[c]).collect()).collect();
        let a = m.predict_with_weights(&x, &w).unwrap();
        let b = permuted.predict_with_weights(&x, &pw).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_count_must_match_experts() {
        let mut rng = RngStream::new(13, 1);
        let m = MoeModel::new_random(3, 2, cfg(2), &mut rng).unwrap();
        let x = rng.normal_tensor(&[4, 3]);
        assert!(m.predict_with_weights(&x, &vec![vec![1.0 / 3.0; 3]; 4]).is_err());
    }

    #[test]
    fn uniform_weights_keep_tied_experts_identical() {
        let mut rng = RngStream::new(3, 1);
        let (x, y) = toy(&mut rng);
        let mut m = MoeModel::new_random(3, 3, MoeConfig { epochs: 10, ..cfg(2) }, &mut rng).unwrap();
        m.train_weighted(&x, &y, &uniform(40, 3), &mut rng).unwrap();
        assert_eq!(m.expert(0), m.expert(1));
        assert_eq!(m.expert(1), m.expert(2));
    }

    #[test]
    fn one_hot_weights_mask_experts() {
        // Expert 1 receives no weight, so its head never moves.
        let mut rng = RngStream::new(4, 1);
        let (x, y) = toy(&mut rng);
        let mut m = MoeModel::new_random(3, 2, cfg(2), &mut rng).unwrap();
        let before = (m.expert(1).0.clone(), m.expert(1).1.clone());
        let w = vec![vec![1.0, 0.0]; 40];
        m.train_weighted(&x, &y, &w, &mut rng).unwrap();
        assert_eq!((m.expert(1).0.clone(), m.expert(1).1.clone()), before);
        assert_ne!(m.expert(0).0, &before.0);
    }

    #[test]
    fn inverse_c_weights_match_rescaled_sgd() {
        for c in [2usize, 4] {
            let mut rng = RngStream::new(5, 1);
            let (x, y) = toy(&mut rng);
            let base = MoeConfig {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.05,
                ..cfg(2)
            };
            let init = MoeModel::new_random(3, c, base.clone(), &mut RngStream::new(9, 9)).unwrap();
            let mut unweighted = init.clone();
            unweighted
                .train_with_weights(&x, &y, &vec![vec![1.0; c]; 40], &mut RngStream::new(7, 7))
                .unwrap();
            let mut weighted = init.clone();
            weighted.config.learning_rate = 0.05 * c as f64;
            weighted
                .train_with_weights(&x, &y, &uniform(40, c), &mut RngStream::new(7, 7))
                .unwrap();
            assert_eq!(weighted.params, unweighted.params, "C = {c}");
        }
    }

    #[test]
    fn loss_falls_below_threshold_on_separable_data() {
        let mut rng = RngStream::new(6, 1);
        let (x, y) = toy(&mut rng);
        let mut m = MoeModel::new_random(3, 2, MoeConfig { epochs: 50, learning_rate: 0.05, ..cfg(2) }, &mut rng).unwrap();
        let curve = m.train_weighted(&x, &y, &uniform(40, 2), &mut rng).unwrap();
        assert!(curve[49] < 0.1, "{curve:?}");
        assert!(curve[49] < curve[0]);
    }

    #[test]
    fn weights_must_be_a_distribution() {
        let mut rng = RngStream::new(7, 1);
        let (x, y) = toy(&mut rng);
        let mut m = MoeModel::new_random(3, 2, cfg(2), &mut rng).unwrap();
        assert!(m.train_weighted(&x, &y, &vec![vec![0.7, 0.7]; 40], &mut rng).is_err());
    }

    #[test]
    fn baseline_equals_single_expert_moe() {
        let mut rng = RngStream::new(8, 1);
        let (x, y) = toy(&mut rng);
        let init = MoeModel::new_random(3, 1, cfg(2), &mut rng).unwrap();
        let (base, _) = baseline_train(init.clone(), &x, &y, &mut RngStream::new(1, 2)).unwrap();
        let mut moe = init;
        moe.train_weighted(&x, &y, &vec![vec![1.0]; 40], &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(base, moe);
    }

    #[test]
    fn evaluation_examples() {
        let y = [0, 1, 1, 0];
        let perfect = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = evaluate_probs(&perfect, &y).unwrap();
        assert_eq!(r.error_rate, 0.0);
        assert_eq!(r.per_class_accuracy, vec![Some(1.0), Some(1.0)]);

        // Uniform rows tie and resolve to class 0.
        let flat = Tensor::full(&[4, 2], 0.5);
        let r = evaluate_probs(&flat, &y).unwrap();
        assert_eq!(r.error_rate, 0.5);
        assert!((r.log_loss - 2f64.ln()).abs() < 1e-12);

        let shuffled = perfect.select_rows(&[3, 1, 0, 2]).unwrap();
        assert_eq!(evaluate_probs(&shuffled, &[0, 1, 0, 1]).unwrap().error_rate, 0.0);
    }

    #[test]
    fn probe_separates_separable_features() {
        let mut rng = RngStream::new(9, 1);
        let (x, y) = toy(&mut rng);
        let acc = logistic_probe(&x, &y, &x, &y, 2, &ProbeOptions::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}
