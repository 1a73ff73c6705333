//! A single variational autoencoder: Gaussian encoder `q(z|x)`, standard
//! normal prior, and a Bernoulli or Gaussian decoder `p(x|z)`.
//!
//! Network layout (both architectures):
//!
//! ```text
//! encoder: x → affine → batchnorm → act → { μ head, log σ² head }
//! decoder: z → affine → batchnorm → act → sigmoid head            (bernoulli)
//!                                        → { μ_dec, log σ²_dec }  (gaussian)
//! ```
//!
//! `act` is `tanh` for the asymmetric architecture and softplus for the
//! symmetric one. Standard deviations are always `exp(½ · log-variance)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, BatchMoments, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{batchnorm_forward, glorot_uniform, BatchNormMode, RunningStats};
use crate::optim::{sgd_step, AdamState, OptimizerKind};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Bernoulli,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// tanh hidden units, intended for binary data.
    Asymmetric,
    /// softplus hidden units, intended for continuous data.
    Symmetric,
}

impl Architecture {
    pub fn activation(self) -> Activation {
        match self {
            Architecture::Asymmetric => Activation::Tanh,
            Architecture::Symmetric => Activation::Softplus,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub decoder_kind: DecoderKind,
    pub architecture: Architecture,
    /// Monte Carlo latent samples per instance.
    pub mc_samples: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl VaeConfig {
    /// Binary-data defaults: asymmetric architecture, Bernoulli decoder,
    /// two latent samples, Adam at 0.001.
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        VaeConfig {
            input_dim,
            hidden_dim,
            latent_dim: Self::default_latent_dim(hidden_dim),
            decoder_kind: DecoderKind::Bernoulli,
            architecture: Architecture::Asymmetric,
            mc_samples: 2,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
        }
    }

    /// Ten percent of the hidden width, at least one.
    pub fn default_latent_dim(hidden_dim: usize) -> usize {
        ((0.1 * hidden_dim as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Diagonal Gaussian `q(z|x)`; `sigma` holds standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Parameters of `p(x|z)` for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderOutput {
    Bernoulli { probs: Tensor },
    Gaussian { mean: Tensor, std: Tensor },
}

impl DecoderOutput {
    /// Expected value of `x` under the decoder distribution.
    pub fn mean(&self) -> &Tensor {
        match self {
            DecoderOutput::Bernoulli { probs } => probs,
            DecoderOutput::Gaussian { mean, .. } => mean,
        }
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            DecoderOutput::Bernoulli { .. } => DecoderKind::Bernoulli,
            DecoderOutput::Gaussian { .. } => DecoderKind::Gaussian,
        }
    }
}

/// Batch-mean ELBO pieces. `loss == kl - recon` exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Sign of the learning rate for a training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateDirection {
    Learn,
    /// Gradient ascent on the loss ("reverse backpropagation").
    Forget,
}

impl UpdateDirection {
    pub fn sign(self) -> f64 {
        match self {
            UpdateDirection::Learn => 1.0,
            UpdateDirection::Forget => -1.0,
        }
    }
}

// Parameter slots. Gaussian decoders carry two extra output tensors.
const ENC_W: usize = 0;
const ENC_B: usize = 1;
const ENC_GAMMA: usize = 2;
const ENC_BETA: usize = 3;
const MU_W: usize = 4;
const MU_B: usize = 5;
const LV_W: usize = 6;
const LV_B: usize = 7;
const DEC_W: usize = 8;
const DEC_B: usize = 9;
const DEC_GAMMA: usize = 10;
const DEC_BETA: usize = 11;
const OUT_W: usize = 12;
const OUT_B: usize = 13;
const OUT_LV_W: usize = 14;
const OUT_LV_B: usize = 15;

pub const PARAM_NAMES: [&str; 16] = [
    "enc.w",
    "enc.b",
    "enc.gamma",
    "enc.beta",
    "mu.w",
    "mu.b",
    "logvar.w",
    "logvar.b",
    "dec.w",
    "dec.b",
    "dec.gamma",
    "dec.beta",
    "out.w",
    "out.b",
    "out_logvar.w",
    "out_logvar.b",
];

fn param_shapes(c: &VaeConfig) -> Vec<Vec<usize>> {
    let (d, h, k) = (c.input_dim, c.hidden_dim, c.latent_dim);
    let mut shapes = vec![
        vec![d, h],
        vec![h],
        vec![h],
        vec![h],
        vec![h, k],
        vec![k],
        vec![h, k],
        vec![k],
        vec![k, h],
        vec![h],
        vec![h],
        vec![h],
        vec![h, d],
        vec![d],
    ];
    if c.decoder_kind == DecoderKind::Gaussian {
        shapes.push(vec![h, d]);
        shapes.push(vec![d]);
    }
    shapes
}

enum DecoderNodes {
    Bernoulli(Var),
    Gaussian { mu: Var, logvar: Var },
}

struct ElboNodes {
    loss: Var,
    recon: Var,
    kl: Var,
    enc_moments: Option<BatchMoments>,
    dec_moments: Vec<BatchMoments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    config: VaeConfig,
    params: Vec<Tensor>,
    enc_stats: RunningStats,
    dec_stats: RunningStats,
    adam: AdamState,
    pretrained: bool,
    freeze_batchnorm: bool,
}

impl VaeModel {
    /// Glorot-uniform weights, zero biases, unit batchnorm scale.
    pub fn new(config: VaeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config)
            .into_iter()
            .enumerate()
            .map(|(slot, shape)| match slot {
                ENC_GAMMA | DEC_GAMMA => Tensor::ones(&shape),
                _ if shape.len() == 2 => glorot_uniform(shape[0], shape[1], rng),
                _ => Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// All weights and biases zero, batchnorm scale one.
    pub fn zeroed(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let params = param_shapes(&config)
            .into_iter()
            .enumerate()
            .map(|(slot, shape)| match slot {
                ENC_GAMMA | DEC_GAMMA => Tensor::ones(&shape),
                _ => Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: VaeConfig, params: Vec<Tensor>) -> Self {
        let adam = AdamState::new(&params, config.learning_rate);
        VaeModel {
            enc_stats: RunningStats::new(config.hidden_dim),
            dec_stats: RunningStats::new(config.hidden_dim),
            config,
            params,
            adam,
            pretrained: false,
            freeze_batchnorm: false,
        }
    }

    /// Reassembles a model from serialized pieces, validating every shape.
    pub fn from_parts(
        config: VaeConfig,
        params: Vec<Tensor>,
        enc_stats: RunningStats,
        dec_stats: RunningStats,
        adam: AdamState,
        pretrained: bool,
        freeze_batchnorm: bool,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if params.len() != shapes.len() || adam.m.len() != shapes.len() || adam.v.len() != shapes.len() {
            return Err(Error::Input(format!(
                "expected {} VAE parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((p, s), (m, v)) in params.iter().zip(&shapes).zip(adam.m.iter().zip(&adam.v)) {
            for t in [p, m, v] {
                if t.shape() != s.as_slice() {
                    return Err(Error::Shape {
                        op: "vae parameters",
                        lhs: s.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        let h = config.hidden_dim;
        for stats in [&enc_stats, &dec_stats] {
            if stats.mean.len() != h || stats.var.len() != h {
                return Err(Error::Shape {
                    op: "batchnorm statistics",
                    lhs: vec![h],
                    rhs: vec![stats.mean.len(), stats.var.len()],
                });
            }
        }
        Ok(VaeModel {
            config,
            params,
            enc_stats,
            dec_stats,
            adam,
            pretrained,
            freeze_batchnorm,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        &PARAM_NAMES[..self.params.len()]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Encoder hidden layer: weight, bias, batchnorm scale and shift.
    pub fn encoder_trunk(&self) -> [&Tensor; 4] {
        [
            &self.params[ENC_W],
            &self.params[ENC_B],
            &self.params[ENC_GAMMA],
            &self.params[ENC_BETA],
        ]
    }

    pub fn encoder_stats(&self) -> &RunningStats {
        &self.enc_stats
    }

    pub fn decoder_stats(&self) -> &RunningStats {
        &self.dec_stats
    }

    pub fn optimizer_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    /// Fresh optimizer moments and step counter.
    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::new(&self.params, self.config.learning_rate);
    }

    pub fn batchnorm_frozen(&self) -> bool {
        self.freeze_batchnorm
    }

    /// When frozen, training normalizes with the running statistics and no
    /// longer updates them.
    pub fn set_batchnorm_frozen(&mut self, frozen: bool) {
        self.freeze_batchnorm = frozen;
    }

    /// Batchnorm mode used for a training batch of `rows` rows.
    pub fn training_mode(&self, rows: usize) -> BatchNormMode {
        if rows >= 2 && !self.freeze_batchnorm {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.expect_matrix("vae input")?;
        if cols != self.config.input_dim {
            return Err(Error::Shape {
                op: "vae input",
                lhs: x.shape().to_vec(),
                rhs: vec![rows, self.config.input_dim],
            });
        }
        if self.config.decoder_kind == DecoderKind::Bernoulli
            && x.data().iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Input("Bernoulli decoder requires inputs in [0, 1]".into()));
        }
        Ok(rows)
    }

    fn check_noise(&self, rows: usize, eps: &[Tensor]) -> Result<()> {
        if eps.is_empty() {
            return Err(Error::Empty("latent noise"));
        }
        let want = [rows, self.config.latent_dim];
        for e in eps {
            if e.shape() != want {
                return Err(Error::Shape {
                    op: "latent noise",
                    lhs: want.to_vec(),
                    rhs: e.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    fn encoder_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Var, Option<BatchMoments>)> {
        let h = g.affine(x, p[ENC_W], p[ENC_B])?;
        let (h, moments) = batchnorm_forward(g, h, p[ENC_GAMMA], p[ENC_BETA], &self.enc_stats, mode)?;
        let h = g.activation(h, self.config.architecture.activation());
        let mu = g.affine(h, p[MU_W], p[MU_B])?;
        let logvar = g.affine(h, p[LV_W], p[LV_B])?;
        Ok((mu, logvar, moments))
    }

    fn decoder_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        z: Var,
        mode: BatchNormMode,
    ) -> Result<(DecoderNodes, Option<BatchMoments>)> {
        let h = g.affine(z, p[DEC_W], p[DEC_B])?;
        let (h, moments) = batchnorm_forward(g, h, p[DEC_GAMMA], p[DEC_BETA], &self.dec_stats, mode)?;
        let h = g.activation(h, self.config.architecture.activation());
        let out = g.affine(h, p[OUT_W], p[OUT_B])?;
        let nodes = match self.config.decoder_kind {
            DecoderKind::Bernoulli => DecoderNodes::Bernoulli(g.activation(out, Activation::Sigmoid)),
            DecoderKind::Gaussian => DecoderNodes::Gaussian {
                mu: out,
                logvar: g.affine(h, p[OUT_LV_W], p[OUT_LV_B])?,
            },
        };
        Ok((nodes, moments))
    }

    fn recon_graph(g: &mut Graph, x: &Tensor, dec: &DecoderNodes) -> Result<Var> {
        match *dec {
            DecoderNodes::Bernoulli(probs) => g.bernoulli_log_likelihood(probs, x),
            DecoderNodes::Gaussian { mu, logvar } => {
                let xc = g.constant(x.clone());
                let diff = g.sub(xc, mu)?;
                let sq = g.square(diff);
                let neg = g.scale(logvar, -1.0);
                let inv_var = g.exp(neg);
                let scaled = g.mul(sq, inv_var)?;
                let s = g.add(logvar, scaled)?;
                let s = g.scale(s, -0.5);
                let s = g.add_scalar(s, -HALF_LN_2PI);
                g.sum_rows(s)
            }
        }
    }

    /// `½ Σ_d (μ² + σ² − 1 − log σ²)` per row, with `logvar = log σ²`.
    fn kl_graph(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
        let mu2 = g.square(mu);
        let var = g.exp(logvar);
        let s = g.add(mu2, var)?;
        let s = g.sub(s, logvar)?;
        let s = g.add_scalar(s, -1.0);
        let s = g.scale(s, 0.5);
        g.sum_rows(s)
    }

    fn elbo_graph(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: &Tensor,
        eps: &[Tensor],
        mode: BatchNormMode,
    ) -> Result<ElboNodes> {
        let xc = g.constant(x.clone());
        let (mu, logvar, enc_moments) = self.encoder_graph(g, p, xc, mode)?;
        let half = g.scale(logvar, 0.5);
        let sigma = g.exp(half);
        let kl_rows = Self::kl_graph(g, mu, logvar)?;

        let mut recon_rows: Option<Var> = None;
        let mut dec_moments = Vec::new();
        for e in eps {
            let ec = g.constant(e.clone());
            let noise = g.mul(sigma, ec)?;
            let z = g.add(mu, noise)?;
            let (dec, m) = self.decoder_graph(g, p, z, mode)?;
            dec_moments.extend(m);
            let r = Self::recon_graph(g, x, &dec)?;
            recon_rows = Some(match recon_rows {
                None => r,
                Some(acc) => g.add(acc, r)?,
            });
        }
        let recon_rows = recon_rows.ok_or(Error::Empty("latent noise"))?;
        let recon_rows = g.scale(recon_rows, 1.0 / eps.len() as f64);
        let kl = g.mean(kl_rows);
        let recon = g.mean(recon_rows);
        let loss = g.sub(kl, recon)?;
        Ok(ElboNodes {
            loss,
            recon,
            kl,
            enc_moments,
            dec_moments,
        })
    }

    fn terms(g: &Graph, nodes: &ElboNodes) -> ElboTerms {
        ElboTerms {
            loss: g.value(nodes.loss).data()[0],
            recon: g.value(nodes.recon).data()[0],
            kl: g.value(nodes.kl).data()[0],
        }
    }

    /// `L` standard normal noise tensors shaped for a batch of `rows`.
    pub fn draw_noise(&self, rows: usize, rng: &mut RngStream) -> Vec<Tensor> {
        (0..self.config.mc_samples)
            .map(|_| rng.normal_tensor(&[rows, self.config.latent_dim]))
            .collect()
    }

    /// Moments of `q(z|x)` using the running batchnorm statistics.
    pub fn encode(&self, x: &Tensor) -> Result<LatentGaussian> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let xc = g.constant(x.clone());
        let (mu, logvar, _) = self.encoder_graph(&mut g, &p, xc, BatchNormMode::Eval)?;
        Ok(LatentGaussian {
            mu: g.value(mu).clone(),
            sigma: g.value(logvar).map(|s| (0.5 * s).exp()),
        })
    }

    /// Decoder distribution for latent codes `z`, using running statistics.
    pub fn decode(&self, z: &Tensor) -> Result<DecoderOutput> {
        let (rows, k) = z.expect_matrix("decode")?;
        if k != self.config.latent_dim {
            return Err(Error::Shape {
                op: "decode",
                lhs: z.shape().to_vec(),
                rhs: vec![rows, self.config.latent_dim],
            });
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let zc = g.constant(z.clone());
        let (dec, _) = self.decoder_graph(&mut g, &p, zc, BatchNormMode::Eval)?;
        Ok(match dec {
            DecoderNodes::Bernoulli(probs) => DecoderOutput::Bernoulli {
                probs: g.value(probs).clone(),
            },
            DecoderNodes::Gaussian { mu, logvar } => DecoderOutput::Gaussian {
                mean: g.value(mu).clone(),
                std: g.value(logvar).map(|s| (0.5 * s).exp()),
            },
        })
    }

    /// Batch-mean ELBO terms with fresh reparameterization noise.
    pub fn elbo_loss(&self, x: &Tensor, rng: &mut RngStream) -> Result<ElboTerms> {
        let rows = self.check_input(x)?;
        let eps = self.draw_noise(rows, rng);
        self.elbo_loss_with_noise(x, &eps)
    }

    /// Batch-mean ELBO terms for the given noise, one tensor per sample.
    pub fn elbo_loss_with_noise(&self, x: &Tensor, eps: &[Tensor]) -> Result<ElboTerms> {
        let rows = self.check_input(x)?;
        self.check_noise(rows, eps)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let nodes = self.elbo_graph(&mut g, &p, x, eps, self.training_mode(rows))?;
        Ok(Self::terms(&g, &nodes))
    }

    /// ELBO terms and the loss gradient for every parameter, in slot order.
    pub fn elbo_gradients(&self, x: &Tensor, eps: &[Tensor]) -> Result<(ElboTerms, Vec<Tensor>)> {
        let (terms, grads, _) = self.elbo_gradients_inner(x, eps)?;
        Ok((terms, grads))
    }

    fn elbo_gradients_inner(
        &self,
        x: &Tensor,
        eps: &[Tensor],
    ) -> Result<(ElboTerms, Vec<Tensor>, (Option<BatchMoments>, Vec<BatchMoments>))> {
        let rows = self.check_input(x)?;
        self.check_noise(rows, eps)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let nodes = self.elbo_graph(&mut g, &p, x, eps, self.training_mode(rows))?;
        let terms = Self::terms(&g, &nodes);
        let mut grads = g.backward(nodes.loss)?;
        let grads = p.iter().map(|&v| grads.take(v)).collect();
        Ok((terms, grads, (nodes.enc_moments, nodes.dec_moments)))
    }

    /// One optimizer step on `x` with fresh noise; the effective learning
    /// rate is `direction.sign() · learning_rate`. Returns the pre-step loss.
    pub fn train_step(&mut self, x: &Tensor, rng: &mut RngStream, direction: UpdateDirection) -> Result<f64> {
        let rows = self.check_input(x)?;
        let eps = self.draw_noise(rows, rng);
        self.train_step_with_noise(x, &eps, direction)
    }

    pub fn train_step_with_noise(
        &mut self,
        x: &Tensor,
        eps: &[Tensor],
        direction: UpdateDirection,
    ) -> Result<f64> {
        let (terms, grads, (enc_m, dec_m)) = self.elbo_gradients_inner(x, eps)?;
        if !terms.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                value: terms.loss,
                batch: 0,
                component: None,
            });
        }
        self.apply_gradients(&grads, direction)?;
        // Running statistics only track data being learned.
        if direction == UpdateDirection::Learn {
            if let Some(m) = enc_m {
                self.enc_stats.update(&m);
            }
            for m in &dec_m {
                self.dec_stats.update(m);
            }
        }
        Ok(terms.loss)
    }

    /// Applies one optimizer update with the given gradients.
    pub fn apply_gradients(&mut self, grads: &[Tensor], direction: UpdateDirection) -> Result<()> {
        let lr = direction.sign() * self.config.learning_rate;
        match self.config.optimizer {
            OptimizerKind::Adam => self.adam.step_with_lr(&mut self.params, grads, lr)?,
            OptimizerKind::Sgd => sgd_step(&mut self.params, grads, lr)?,
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                value: f64::NAN,
                batch: 0,
                component: None,
            });
        }
        Ok(())
    }

    /// Mean decoder output over `n_samples` latent draws from `q(z|x)`.
    pub fn expected_reconstruction_single(
        &self,
        x: &Tensor,
        rng: &mut RngStream,
        n_samples: usize,
    ) -> Result<Tensor> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        let rows = self.check_input(x)?;
        let eps: Vec<Tensor> = (0..n_samples)
            .map(|_| rng.normal_tensor(&[rows, self.config.latent_dim]))
            .collect();
        self.expected_reconstruction_with_noise(x, &eps)
    }

    pub fn expected_reconstruction_with_noise(&self, x: &Tensor, eps: &[Tensor]) -> Result<Tensor> {
        let rows = self.check_input(x)?;
        self.check_noise(rows, eps)?;
        let latent = self.encode(x)?;
        let mut acc = vec![0.0; rows * self.config.input_dim];
        for e in eps {
            let z = reparameterize(&latent, e)?;
            let out = self.decode(&z)?;
            for (a, v) in acc.iter_mut().zip(out.mean().data()) {
                *a += v;
            }
        }
        let n = eps.len() as f64;
        Tensor::new(vec![rows, self.config.input_dim], acc.into_iter().map(|v| v / n).collect())
    }

    /// Per-row Monte Carlo estimate of `E_q[log p(x|z)]` using the running
    /// batchnorm statistics (rows are evaluated independently).
    pub fn expected_log_likelihood(&self, x: &Tensor, eps: &[Tensor]) -> Result<Vec<f64>> {
        let rows = self.check_input(x)?;
        self.check_noise(rows, eps)?;
        let latent = self.encode(x)?;
        let mut acc = vec![0.0; rows];
        for e in eps {
            let z = reparameterize(&latent, e)?;
            let ll = recon_log_likelihood(x, &self.decode(&z)?)?;
            for (a, v) in acc.iter_mut().zip(ll) {
                *a += v;
            }
        }
        let n = eps.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }

    /// `log p(x | z = μ(x))` per row; the noise-free counterpart of
    /// [`Self::expected_log_likelihood`].
    pub fn log_likelihood_at_mean(&self, x: &Tensor) -> Result<Vec<f64>> {
        let latent = self.encode(x)?;
        recon_log_likelihood(x, &self.decode(&latent.mu)?)
    }

    /// Per-row ELBO `E_q[log p(x|z)] − KL(q‖p)` under running statistics.
    pub fn elbo_rows(&self, x: &Tensor, eps: &[Tensor]) -> Result<Vec<f64>> {
        let ll = self.expected_log_likelihood(x, eps)?;
        let kl = kl_diag_gaussian(&self.encode(x)?);
        Ok(ll.into_iter().zip(kl).map(|(l, k)| l - k).collect())
    }

    /// Deep copy with fresh optimizer state.
    pub fn spawn_copy(&self) -> VaeModel {
        let mut m = self.clone();
        m.reset_optimizer();
        m
    }
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(latent: &LatentGaussian, eps: &Tensor) -> Result<Tensor> {
    let scaled = latent.sigma.zip_map(eps, "reparameterize", |s, e| s * e)?;
    latent.mu.zip_map(&scaled, "reparameterize", |m, s| m + s)
}

/// Closed-form `KL(N(μ, σ²I) ‖ N(0, I))` per row.
pub fn kl_diag_gaussian(latent: &LatentGaussian) -> Vec<f64> {
    let k = latent.mu.cols();
    latent
        .mu
        .data()
        .chunks_exact(k)
        .zip(latent.sigma.data().chunks_exact(k))
        .map(|(mu, sigma)| {
            0.5 * mu
                .iter()
                .zip(sigma)
                .map(|(&m, &s)| {
                    let v = s * s;
                    m * m + v - 1.0 - v.ln()
                })
                .sum::<f64>()
        })
        .collect()
}

/// `log p(x | decoder)` per row.
pub fn recon_log_likelihood(x: &Tensor, decoder: &DecoderOutput) -> Result<Vec<f64>> {
    x.expect_same_shape(decoder.mean(), "recon_log_likelihood")?;
    let d = x.cols();
    match decoder {
        DecoderOutput::Bernoulli { probs } => {
            if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Input("Bernoulli likelihood requires x in [0, 1]".into()));
            }
            Ok(x.data()
                .chunks_exact(d)
                .zip(probs.data().chunks_exact(d))
                .map(|(xr, pr)| {
                    xr.iter()
                        .zip(pr)
                        .map(|(&t, &p)| {
                            let p = p.clamp(crate::autodiff::BERNOULLI_CLAMP, 1.0 - crate::autodiff::BERNOULLI_CLAMP);
                            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                        })
                        .sum()
                })
                .collect())
        }
        DecoderOutput::Gaussian { mean, std } => Ok(x
            .data()
            .chunks_exact(d)
            .zip(mean.data().chunks_exact(d).zip(std.data().chunks_exact(d)))
            .map(|(xr, (mr, sr))| {
                xr.iter()
                    .zip(mr.iter().zip(sr))
                    .map(|(&xv, (&m, &s))| {
                        let z = (xv - m) / s;
                        -HALF_LN_2PI - s.ln() - 0.5 * z * z
                    })
                    .sum()
            })
            .collect()),
    }
}

/// Stopping rule and budget for [`train_vae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Optimizer steps.
    pub max_iterations: usize,
    pub batch_size: usize,
    /// Relative change between consecutive window-mean losses that counts
    /// as converged.
    pub convergence_tol: f64,
    pub window: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_iterations: 1000,
            batch_size: 500,
            convergence_tol: 1e-4,
            window: 50,
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainCurve {
    pub losses: Vec<f64>,
    pub converged: bool,
}

/// Minibatch training of one VAE on all rows of `data` until the loss
/// plateaus or the iteration budget runs out. Marks the model pre-trained.
pub fn train_vae(
    model: &mut VaeModel,
    data: &Tensor,
    options: &TrainOptions,
    seed: u64,
    rng: &mut RngStream,
) -> Result<TrainCurve> {
    if options.batch_size == 0 || options.window == 0 {
        return Err(Error::Config("batch_size and window must be at least 1".into()));
    }
    let n = data.rows();
    let mut losses = Vec::with_capacity(options.max_iterations);
    let mut converged = false;
    let mut prev_window: Option<f64> = None;
    let mut epoch = 0u64;
    'outer: while losses.len() < options.max_iterations {
        for batch in crate::data::batch_iter(n, options.batch_size, seed, epoch)? {
            if losses.len() >= options.max_iterations {
                break 'outer;
            }
            let x = data.select_rows(&batch)?;
            let loss = model
                .train_step(&x, rng, UpdateDirection::Learn)
                .map_err(|e| e.with_training_context(losses.len(), None))?;
            losses.push(loss);
            if losses.len() % options.window == 0 {
                let w = &losses[losses.len() - options.window..];
                let mean = w.iter().sum::<f64>() / w.len() as f64;
                if let Some(prev) = prev_window {
                    if ((mean - prev) / prev.abs().max(1e-12)).abs() < options.convergence_tol {
                        converged = true;
                        break 'outer;
                    }
                }
                prev_window = Some(mean);
            }
        }
        epoch += 1;
    }
    model.mark_pretrained();
    Ok(TrainCurve { losses, converged })
}

/// Builds a VAE from the `INIT` stream of `seed` and trains it on all of
/// `data` with the `PRETRAIN` stream.
pub fn pretrain_base(
    config: VaeConfig,
    data: &Tensor,
    options: &TrainOptions,
    seed: u64,
) -> Result<(VaeModel, TrainCurve)> {
    let mut model = VaeModel::new(config, &mut RngStream::new(seed, crate::rng::streams::INIT))?;
    let mut rng = RngStream::new(seed, crate::rng::streams::PRETRAIN);
    let curve = train_vae(&mut model, data, options, seed, &mut rng)?;
    Ok((model, curve))
}
