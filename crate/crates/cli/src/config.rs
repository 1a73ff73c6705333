//! Run configuration: a TOML file plus command-line overrides.

use std::path::PathBuf;

use dpvae::mixture::MixtureConfig;
use dpvae::moe::MoeConfig;
use dpvae::optim::OptimizerKind;
use dpvae::vae::{Architecture, DecoderKind, TrainOptions, VaeConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where instances come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        /// Threshold for binarization; omit to keep grey levels.
        binarize: Option<f64>,
    },
    Csv {
        train: PathBuf,
        test: Option<PathBuf>,
        binarize: Option<f64>,
    },
    /// Random binary prototypes with bit-flip noise, drawn from `seed`.
    Synthetic {
        classes: usize,
        dim: usize,
        count: usize,
        #[serde(default)]
        test_count: usize,
        flip_rate: f64,
    },
}

/// How many labels per class the semi-supervised phase may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelBudget {
    PerClass(usize),
    All,
}

impl std::str::FromStr for LabelBudget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "all" => Ok(LabelBudget::All),
            n => n
                .parse()
                .map(LabelBudget::PerClass)
                .map_err(|_| format!("label budget must be a count per class or \"all\", got {s:?}")),
        }
    }
}

impl std::fmt::Display for LabelBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelBudget::PerClass(n) => write!(f, "{n}"),
            LabelBudget::All => f.write_str("all"),
        }
    }
}

impl Serialize for LabelBudget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LabelBudget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(LabelBudget::PerClass(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub alpha: f64,
    pub hidden_dim: usize,
    /// Defaults to ten percent of `hidden_dim`.
    pub latent_dim: Option<usize>,
    pub mc_samples: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub max_sweeps: usize,
    pub c_max: usize,
    pub decoder_kind: DecoderKind,
    pub architecture: Architecture,
    pub optimizer: OptimizerKind,
    pub convergence_tol: f64,
    /// Optimizer steps per component per sweep.
    pub component_steps: usize,
    /// Labeled instances per class used to seed mixture assignments;
    /// 0 starts from a single component without labels.
    pub seed_labels_per_class: usize,
    pub trials: usize,
    pub label_budget: LabelBudget,
    pub moe_learning_rate: f64,
    pub moe_epochs: usize,
    /// Record wall-clock times in the metrics file (breaks byte-identity
    /// between runs).
    pub wall_clock: bool,
    pub out_dir: Option<PathBuf>,
    pub data: Option<DataSource>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mix = MixtureConfig::default();
        RunConfig {
            run_id: "dpvae".into(),
            seed: 0,
            alpha: mix.alpha,
            hidden_dim: 100,
            latent_dim: None,
            mc_samples: mix.mc_samples,
            learning_rate: 0.001,
            batch_size: 500,
            max_iterations: 1000,
            max_sweeps: mix.max_sweeps,
            c_max: mix.c_max,
            decoder_kind: DecoderKind::Bernoulli,
            architecture: Architecture::Asymmetric,
            optimizer: OptimizerKind::Adam,
            convergence_tol: 1e-4,
            component_steps: mix.component_steps,
            seed_labels_per_class: 0,
            trials: 3,
            label_budget: LabelBudget::PerClass(5),
            moe_learning_rate: 0.01,
            moe_epochs: 200,
            wall_clock: false,
            out_dir: None,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(format!("config: {m}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '"', '\n', '\r']) {
            return bad(format!("run_id {:?} must be a plain token", self.run_id));
        }
        if !(self.moe_learning_rate.is_finite() && self.moe_learning_rate >= 0.0) {
            return bad("moe_learning_rate must be finite and non-negative".into());
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be finite and non-negative".into());
        }
        self.mixture_config().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(DataSource::Synthetic {
            classes,
            dim,
            count,
            flip_rate,
            ..
        }) = &self.data
        {
            if *classes == 0 || *dim == 0 || *count == 0 {
                return bad("synthetic data needs classes, dim and count ≥ 1".into());
            }
            if !(0.0..0.5).contains(flip_rate) {
                return bad(format!("flip_rate must be in [0, 0.5), got {flip_rate}"));
            }
        }
        Ok(())
    }

    pub fn vae_config(&self, input_dim: usize) -> VaeConfig {
        VaeConfig {
            latent_dim: self
                .latent_dim
                .unwrap_or_else(|| VaeConfig::default_latent_dim(self.hidden_dim)),
            decoder_kind: self.decoder_kind,
            architecture: self.architecture,
            mc_samples: self.mc_samples,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            ..VaeConfig::new(input_dim, self.hidden_dim)
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            max_iterations: self.max_iterations,
            batch_size: self.batch_size,
            convergence_tol: self.convergence_tol,
            ..TrainOptions::default()
        }
    }

    pub fn mixture_config(&self) -> MixtureConfig {
        MixtureConfig {
            alpha: self.alpha,
            c_max: self.c_max,
            mc_samples: self.mc_samples,
            max_sweeps: self.max_sweeps,
            convergence_tol: self.convergence_tol,
            component_steps: self.component_steps,
            batch_size: self.batch_size,
            ..MixtureConfig::default()
        }
    }

    pub fn moe_config(&self, n_classes: usize) -> MoeConfig {
        MoeConfig {
            learning_rate: self.moe_learning_rate,
            epochs: self.moe_epochs,
            batch_size: self.batch_size,
            ..MoeConfig::new(self.hidden_dim, n_classes)
        }
    }

    /// JSON echo for checkpoints and metrics headers. The output directory
    /// is left out so identical runs in different places match byte for byte.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config is serializable");
        v.as_object_mut().expect("struct").remove("out_dir");
        v
    }
}
