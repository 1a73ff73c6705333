//! Model state to and from [`Checkpoint`] containers.
//!
//! A [`Snapshot`] holds any of a single VAE, a mixture and a classifier.
//! Tensors are stored under `<section>/<kind>/<name>`; everything else
//! (configs, optimizer counters, random stream positions, assignments)
//! lives in the JSON metadata under the same section key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::checkpoint::{Checkpoint, CheckpointError};
use crate::error::{Error, Result};
use crate::mixture::{Component, MixtureConfig, MixtureState};
use crate::moe::{MoeConfig, MoeModel};
use crate::nn::RunningStats;
use crate::optim::AdamState;
use crate::rng::{RngSnapshot, RngStream};
use crate::tensor::Tensor;
use crate::vae::{VaeConfig, VaeModel};

#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pub vae: Option<VaeModel>,
    pub mixture: Option<MixtureState>,
    pub moe: Option<MoeModel>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    learning_rate: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    config: VaeConfig,
    pretrained: bool,
    freeze_batchnorm: bool,
    adam: AdamMeta,
}

#[derive(Serialize, Deserialize)]
struct ComponentMeta {
    id: u64,
    rng: RngSnapshot,
    added: Vec<usize>,
    removed: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MixtureMeta {
    config: MixtureConfig,
    components: Vec<ComponentMeta>,
    assignments: Vec<usize>,
    next_id: u64,
    seed: u64,
    gibbs_rng: RngSnapshot,
    sweeps_done: usize,
    stalled: usize,
    last_elbo: Option<f64>,
    converged: bool,
}

#[derive(Serialize, Deserialize)]
struct MoeMeta {
    config: MoeConfig,
    input_dim: usize,
    n_experts: usize,
    adam: AdamMeta,
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

fn adam_meta(a: &AdamState) -> AdamMeta {
    AdamMeta {
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        learning_rate: a.learning_rate,
        t: a.t,
    }
}

fn push_params(ck: &mut Checkpoint, prefix: &str, names: &[String], params: &[Tensor], adam: &AdamState) -> Result<()> {
    for (name, p) in names.iter().zip(params) {
        ck.push(format!("{prefix}/param/{name}"), p.clone())?;
    }
    for (name, m) in names.iter().zip(&adam.m) {
        ck.push(format!("{prefix}/adam_m/{name}"), m.clone())?;
    }
    for (name, v) in names.iter().zip(&adam.v) {
        ck.push(format!("{prefix}/adam_v/{name}"), v.clone())?;
    }
    Ok(())
}

fn read_params(ck: &Checkpoint, prefix: &str, names: &[String], meta: &AdamMeta) -> Result<(Vec<Tensor>, AdamState)> {
    let get = |kind: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| Ok(ck.get(&format!("{prefix}/{kind}/{n}"))?.clone()))
            .collect()
    };
    let adam = AdamState {
        beta1: meta.beta1,
        beta2: meta.beta2,
        epsilon: meta.epsilon,
        learning_rate: meta.learning_rate,
        t: meta.t,
        m: get("adam_m")?,
        v: get("adam_v")?,
    };
    Ok((get("param")?, adam))
}

fn push_stats(ck: &mut Checkpoint, name: &str, stats: &RunningStats) -> Result<()> {
    ck.push(format!("{name}/mean"), Tensor::vector(stats.mean.clone())?)?;
    ck.push(format!("{name}/var"), Tensor::vector(stats.var.clone())?)?;
    Ok(())
}

fn read_stats(ck: &Checkpoint, name: &str) -> Result<RunningStats> {
    Ok(RunningStats {
        mean: ck.get(&format!("{name}/mean"))?.data().to_vec(),
        var: ck.get(&format!("{name}/var"))?.data().to_vec(),
    })
}

fn write_vae(ck: &mut Checkpoint, prefix: &str, model: &VaeModel) -> Result<Value> {
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    push_params(ck, prefix, &names, model.params(), model.optimizer_state())?;
    push_stats(ck, &format!("{prefix}/enc_bn"), model.encoder_stats())?;
    push_stats(ck, &format!("{prefix}/dec_bn"), model.decoder_stats())?;
    Ok(serde_json::to_value(VaeMeta {
        config: model.config().clone(),
        pretrained: model.is_pretrained(),
        freeze_batchnorm: model.batchnorm_frozen(),
        adam: adam_meta(model.optimizer_state()),
    })
    .expect("serializable"))
}

fn read_vae(ck: &Checkpoint, prefix: &str, meta: &Value) -> Result<VaeModel> {
    let meta: VaeMeta =
        serde_json::from_value(meta.clone()).map_err(|e| header_err(format!("{prefix}: {e}")))?;
    // Names depend only on the decoder kind; a zeroed model supplies them.
    let names: Vec<String> = VaeModel::zeroed(meta.config.clone())?
        .param_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (params, adam) = read_params(ck, prefix, &names, &meta.adam)?;
    VaeModel::from_parts(
        meta.config,
        params,
        read_stats(ck, &format!("{prefix}/enc_bn"))?,
        read_stats(ck, &format!("{prefix}/dec_bn"))?,
        adam,
        meta.pretrained,
        meta.freeze_batchnorm,
    )
}

fn write_mixture(ck: &mut Checkpoint, state: &MixtureState) -> Result<Value> {
    let base = write_vae(ck, "mixture/base", &state.base)?;
    let mut comps = Vec::new();
    let mut comp_meta = Vec::new();
    for (i, c) in state.components.iter().enumerate() {
        comps.push(write_vae(ck, &format!("mixture/c{i}"), &c.model)?);
        comp_meta.push(ComponentMeta {
            id: c.id,
            rng: c.rng.snapshot(),
            added: c.added.clone(),
            removed: c.removed.clone(),
        });
    }
    let meta = MixtureMeta {
        config: state.config.clone(),
        components: comp_meta,
        assignments: state.assignments.clone(),
        next_id: state.next_id,
        seed: state.seed,
        gibbs_rng: state.gibbs_rng.snapshot(),
        sweeps_done: state.sweeps_done,
        stalled: state.stalled,
        last_elbo: state.last_elbo,
        converged: state.converged,
    };
    Ok(json!({
        "state": serde_json::to_value(meta).expect("serializable"),
        "base": base,
        "components": comps,
    }))
}

fn read_mixture(ck: &Checkpoint, meta: &Value) -> Result<MixtureState> {
    let state: MixtureMeta = serde_json::from_value(meta["state"].clone())
        .map_err(|e| header_err(format!("mixture: {e}")))?;
    let comp_vaes = meta["components"]
        .as_array()
        .ok_or_else(|| header_err("mixture: missing component list"))?;
    if comp_vaes.len() != state.components.len() || state.components.is_empty() {
        return Err(header_err("mixture: component metadata is inconsistent"));
    }
    state.config.validate()?;
    let base = read_vae(ck, "mixture/base", &meta["base"])?;
    let mut components = Vec::with_capacity(comp_vaes.len());
    for (i, (cm, vm)) in state.components.into_iter().zip(comp_vaes).enumerate() {
        let n = state.assignments.len();
        if cm.added.iter().chain(&cm.removed).any(|&r| r >= n) {
            return Err(header_err(format!("mixture: component {i} change set out of range")));
        }
        components.push(Component {
            id: cm.id,
            model: read_vae(ck, &format!("mixture/c{i}"), vm)?,
            rng: RngStream::restore(&cm.rng),
            added: cm.added,
            removed: cm.removed,
        });
    }
    if state.assignments.iter().any(|&a| a >= components.len()) {
        return Err(header_err("mixture: assignment refers to a missing component"));
    }
    Ok(MixtureState {
        config: state.config,
        base,
        components,
        assignments: state.assignments,
        next_id: state.next_id,
        seed: state.seed,
        gibbs_rng: RngStream::restore(&state.gibbs_rng),
        sweeps_done: state.sweeps_done,
        stalled: state.stalled,
        last_elbo: state.last_elbo,
        converged: state.converged,
    })
}

fn write_moe(ck: &mut Checkpoint, model: &MoeModel) -> Result<Value> {
    push_params(ck, "moe", &model.param_names(), model.params(), model.optimizer_state())?;
    push_stats(ck, "moe/trunk_bn", model.trunk_stats())?;
    Ok(serde_json::to_value(MoeMeta {
        config: model.config().clone(),
        input_dim: model.input_dim(),
        n_experts: model.n_experts(),
        adam: adam_meta(model.optimizer_state()),
    })
    .expect("serializable"))
}

fn read_moe(ck: &Checkpoint, meta: &Value) -> Result<MoeModel> {
    let meta: MoeMeta = serde_json::from_value(meta.clone()).map_err(|e| header_err(format!("moe: {e}")))?;
    let mut names: Vec<String> = ["trunk.w", "trunk.b", "trunk.gamma", "trunk.beta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for c in 0..meta.n_experts {
        names.push(format!("expert{c}.w"));
        names.push(format!("expert{c}.b"));
    }
    let (params, adam) = read_params(ck, "moe", &names, &meta.adam)?;
    MoeModel::from_parts(
        meta.config,
        meta.input_dim,
        meta.n_experts,
        params,
        read_stats(ck, "moe/trunk_bn")?,
        adam,
    )
}

impl Snapshot {
    pub fn to_checkpoint(&self, config_echo: Value) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(config_echo, Value::Null);
        let mut meta = serde_json::Map::new();
        if let Some(v) = &self.vae {
            meta.insert("vae".into(), write_vae(&mut ck, "vae", v)?);
        }
        if let Some(m) = &self.mixture {
            meta.insert("mixture".into(), write_mixture(&mut ck, m)?);
        }
        if let Some(m) = &self.moe {
            meta.insert("moe".into(), write_moe(&mut ck, m)?);
        }
        ck.meta = Value::Object(meta);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .meta
            .as_object()
            .ok_or_else(|| header_err("metadata must be an object"))?;
        Ok(Snapshot {
            vae: meta.get("vae").map(|m| read_vae(ck, "vae", m)).transpose()?,
            mixture: meta.get("mixture").map(|m| read_mixture(ck, m)).transpose()?,
            moe: meta.get("moe").map(|m| read_moe(ck, m)).transpose()?,
        })
    }

    pub fn save(&self, path: &Path, config_echo: Value) -> Result<()> {
        self.to_checkpoint(config_echo)?.save(path)
    }

    /// Loads a snapshot and the config echo stored with it.
    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let ck = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::Selection;
    use crate::vae::{DecoderKind, UpdateDirection};

    fn trained_vae(kind: DecoderKind, seed: u64) -> VaeModel {
        let mut cfg = VaeConfig::new(6, 4);
        cfg.decoder_kind = kind;
        let mut rng = RngStream::new(seed, 1);
        let mut m = VaeModel::new(cfg, &mut rng).unwrap();
        let x = Tensor::new(vec![8, 6], (0..48).map(|i| ((i * 7) % 5 == 0) as u8 as f64).collect()).unwrap();
        for _ in 0..3 {
            m.train_step(&x, &mut rng, UpdateDirection::Learn).unwrap();
        }
        m.mark_pretrained();
        m
    }

    fn data() -> Tensor {
        Tensor::new(vec![12, 6], (0..72).map(|i| ((i * 5 + i / 6) % 3 == 0) as u8 as f64).collect()).unwrap()
    }

    #[test]
    fn vae_round_trip_is_bit_exact() {
        for kind in [DecoderKind::Bernoulli, DecoderKind::Gaussian] {
            let m = trained_vae(kind, 3);
            let snap = Snapshot { vae: Some(m.clone()), ..Default::default() };
            let bytes = snap.to_checkpoint(json!({"k": 1})).unwrap().encode();
            let back = Snapshot::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
            assert_eq!(back.vae.as_ref(), Some(&m));
            let again = back.to_checkpoint(json!({"k": 1})).unwrap().encode();
            assert_eq!(again, bytes);
        }
    }

    #[test]
    fn mixture_resume_continues_identically() {
        let x = data();
        let base = trained_vae(DecoderKind::Bernoulli, 4);
        let cfg = MixtureConfig { component_steps: 2, batch_size: 5, ..Default::default() };
        let mut a = MixtureState::new(base, 12, 2, cfg, 11).unwrap();
        a.optimize_components(&x).unwrap();
        a.gibbs_sweep(&x, Selection::Sample).unwrap();

        let ck = Snapshot { mixture: Some(a.clone()), ..Default::default() }
            .to_checkpoint(Value::Null)
            .unwrap();
        let mut b = Snapshot::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap())
            .unwrap()
            .mixture
            .unwrap();
        for s in [&mut a, &mut b] {
            s.optimize_components(&x).unwrap();
            s.gibbs_sweep(&x, Selection::Sample).unwrap();
        }
        assert_eq!(a.assignments(), b.assignments());
        assert_eq!(a.n_components(), b.n_components());
        for (ca, cb) in a.components().iter().zip(b.components()) {
            assert_eq!(ca.model, cb.model);
            assert_eq!(ca.rng().snapshot(), cb.rng().snapshot());
        }
        let mut ra = RngStream::new(0, 0);
        let mut rb = RngStream::new(0, 0);
        assert_eq!(
            a.expected_reconstruction(&x, &mut ra, 2).unwrap(),
            b.expected_reconstruction(&x, &mut rb, 2).unwrap()
        );
    }

    #[test]
    fn moe_round_trip() {
        let base = trained_vae(DecoderKind::Bernoulli, 5);
        let m = MoeModel::from_encoder(&base, 3, MoeConfig::new(4, 3), &mut RngStream::new(1, 1)).unwrap();
        let snap = Snapshot { moe: Some(m.clone()), ..Default::default() };
        let ck = snap.to_checkpoint(Value::Null).unwrap();
        let back = Snapshot::from_checkpoint(&Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
        assert_eq!(back.moe, Some(m));
        assert!(back.vae.is_none() && back.mixture.is_none());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let m = trained_vae(DecoderKind::Bernoulli, 6);
        let ck = Snapshot { vae: Some(m), ..Default::default() }.to_checkpoint(Value::Null).unwrap();
        let mut cut = Checkpoint::new(ck.config.clone(), ck.meta.clone());
        for (name, t) in ck.tensors().iter().skip(1) {
            cut.push(name.clone(), t.clone()).unwrap();
        }
        assert!(matches!(
            Snapshot::from_checkpoint(&cut),
            Err(Error::Checkpoint(CheckpointError::Missing(_)))
        ));
    }
}
