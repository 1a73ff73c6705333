//! Dirichlet-process mixture of VAEs trained by blocked Gibbs sampling.
//!
//! Each sweep alternates two blocks: a few optimizer steps per component on
//! the instances currently assigned to it, then a pass over all instances
//! that resamples assignments from the Chinese-restaurant conditional with
//! occupation numbers approximated by responsibilities. Components that
//! gain or lose instances get one "forget" step (negative learning rate) on
//! the leavers and one "learn" step on the joiners.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::{softmax, Tensor};
use crate::vae::{kl_diag_gaussian, reparameterize, UpdateDirection, VaeModel};

/// How a new assignment is chosen from its conditional distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Draw from the distribution, with reparameterized responsibilities.
    Sample,
    /// Zero temperature: take the most probable existing component, using
    /// the noise-free likelihood at `z = μ`. Ties go to the lowest index.
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Upper bound on live components.
    pub c_max: usize,
    /// Latent samples per responsibility evaluation.
    pub mc_samples: usize,
    pub max_sweeps: usize,
    /// Relative change of the total ELBO that counts as a stalled sweep.
    pub convergence_tol: f64,
    /// Consecutive stalled sweeps before stopping.
    pub patience: usize,
    /// Optimizer steps per component in the parameter block of a sweep.
    pub component_steps: usize,
    pub batch_size: usize,
    pub spawn: bool,
    /// Zero-temperature sweeps run after sampling stops.
    pub finalize_passes: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            alpha: 2.0,
            c_max: 64,
            mc_samples: 2,
            max_sweeps: 50,
            convergence_tol: 1e-4,
            patience: 3,
            component_steps: 20,
            batch_size: 500,
            spawn: true,
            finalize_passes: 5,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive and finite");
        }
        if self.c_max == 0 {
            return bad("c_max must be at least 1");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence_tol must be non-negative");
        }
        Ok(())
    }
}

/// `η_c = (n − 1) · p(c | x_i)`.
pub fn occupation_number(n: usize, responsibility: f64) -> f64 {
    n.saturating_sub(1) as f64 * responsibility
}

/// Responsibilities from per-component expected log-likelihoods.
pub fn responsibilities_from_log_likelihoods(ll: &[f64]) -> Result<Vec<f64>> {
    softmax(ll)
}

/// Conditional assignment probabilities for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentDistribution {
    pub existing: Vec<f64>,
    pub new: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Existing(usize),
    Spawn,
}

impl AssignmentDistribution {
    /// `existing_c = η_c / (n − 1 + α)`, `new = α / (n − 1 + α)`.
    pub fn new(n: usize, alpha: f64, responsibilities: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("assignment distribution"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if responsibilities.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Input("responsibilities must lie in [0, 1]".into()));
        }
        let denom = (n - 1) as f64 + alpha;
        Ok(AssignmentDistribution {
            existing: responsibilities
                .iter()
                .map(|&r| occupation_number(n, r) / denom)
                .collect(),
            new: alpha / denom,
        })
    }

    pub fn total(&self) -> f64 {
        self.existing.iter().sum::<f64>() + self.new
    }

    /// Categorical draw over `existing ++ [new]`.
    pub fn sample(&self, rng: &mut RngStream) -> Assignment {
        let u = rng.uniform() * self.total();
        let mut acc = 0.0;
        for (c, &p) in self.existing.iter().enumerate() {
            acc += p;
            if u < acc {
                return Assignment::Existing(c);
            }
        }
        if self.new > 0.0 {
            return Assignment::Spawn;
        }
        // Rounding left `u` past the last positive slot.
        let last = self.existing.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Assignment::Existing(last)
    }

    /// Most probable slot; ties go to the lowest index, and existing
    /// components win ties against spawning.
    pub fn argmax(&self, allow_spawn: bool) -> Assignment {
        let best = argmax(&self.existing);
        match best {
            Some(c) if !allow_spawn || self.existing[c] >= self.new => Assignment::Existing(c),
            None if !allow_spawn => Assignment::Existing(0),
            _ => Assignment::Spawn,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some(b) if v[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Categorical draw proportional to non-negative `weights`.
fn sample_weights(weights: &[f64], rng: &mut RngStream) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// One live mixture component.
#[derive(Clone, Debug)]
pub struct Component {
    /// Stable identifier; also keys the component's random stream.
    pub id: u64,
    pub model: VaeModel,
    pub(crate) rng: RngStream,
    pub(crate) added: Vec<usize>,
    pub(crate) removed: Vec<usize>,
}

impl Component {
    pub fn added(&self) -> &[usize] {
        &self.added
    }

    pub fn removed(&self) -> &[usize] {
        &self.removed
    }

    pub fn rng(&self) -> &RngStream {
        &self.rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub reassignments: usize,
    pub spawns: usize,
    pub removals: usize,
    pub added_total: usize,
    pub removed_total: usize,
    pub components_before: usize,
    pub components_after: usize,
}

/// Per-sweep summary handed to the observer of [`MixtureState::run`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub sweep: usize,
    pub stats: SweepStats,
    /// Mean per-instance ELBO under the assigned component.
    pub elbo: f64,
    /// Mean expected reconstruction log-likelihood.
    pub recon: f64,
    pub kl: f64,
    pub converged: bool,
}

/// Components, assignments and sampler state.
#[derive(Clone, Debug)]
pub struct MixtureState {
    pub(crate) config: MixtureConfig,
    pub(crate) base: VaeModel,
    pub(crate) components: Vec<Component>,
    pub(crate) assignments: Vec<usize>,
    pub(crate) next_id: u64,
    pub(crate) seed: u64,
    pub(crate) gibbs_rng: RngStream,
    pub(crate) sweeps_done: usize,
    pub(crate) stalled: usize,
    pub(crate) last_elbo: Option<f64>,
    pub(crate) converged: bool,
}

impl MixtureState {
    /// `c_init` copies of the pre-trained `base`, every instance on
    /// component 0.
    pub fn new(base: VaeModel, n: usize, c_init: usize, config: MixtureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !base.is_pretrained() {
            return Err(Error::NotPretrained);
        }
        if n == 0 {
            return Err(Error::Empty("mixture dataset"));
        }
        if c_init == 0 || c_init > config.c_max {
            return Err(Error::Config(format!(
                "initial component count {c_init} must be in 1..={}",
                config.c_max
            )));
        }
        let mut state = MixtureState {
            config,
            base,
            components: Vec::new(),
            assignments: vec![0; n],
            next_id: 0,
            seed,
            gibbs_rng: RngStream::new(seed, streams::GIBBS),
            sweeps_done: 0,
            stalled: 0,
            last_elbo: None,
            converged: false,
        };
        for _ in 0..c_init {
            state.spawn_component()?;
        }
        Ok(state)
    }

    pub fn config(&self) -> &MixtureConfig {
        &self.config
    }

    pub fn base(&self) -> &VaeModel {
        &self.base
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [Component] {
        &mut self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps_done
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// Instances assigned to each component.
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.components.len()];
        for &c in &self.assignments {
            counts[c] += 1;
        }
        counts
    }

    /// Data rows assigned to component `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == c).collect()
    }

    /// Appends a copy of the base model with fresh optimizer state and its
    /// own random stream.
    pub fn spawn_component(&mut self) -> Result<usize> {
        if !self.base.is_pretrained() {
            return Err(Error::NotPretrained);
        }
        let id = self.next_id;
        self.next_id += 1;
        self.components.push(Component {
            id,
            model: self.base.spawn_copy(),
            rng: RngStream::new(self.seed, streams::COMPONENT_BASE + id),
            added: Vec::new(),
            removed: Vec::new(),
        });
        Ok(self.components.len() - 1)
    }

    /// Moves instance `i` to component `to`, recording the change sets.
    pub fn reassign(&mut self, i: usize, to: usize) {
        let from = self.assignments[i];
        if from == to {
            return;
        }
        self.assignments[i] = to;
        self.components[from].removed.push(i);
        self.components[to].added.push(i);
    }

    /// Deletes components with no instances, keeping survivors in order.
    /// Returns the number removed.
    pub fn remove_empty(&mut self) -> usize {
        let occ = self.occupancy();
        let mut remap = vec![usize::MAX; self.components.len()];
        let mut next = 0;
        for (c, &k) in occ.iter().enumerate() {
            if k > 0 {
                remap[c] = next;
                next += 1;
            }
        }
        let before = self.components.len();
        let mut c = 0;
        self.components.retain(|_| {
            let keep = occ[c] > 0;
            c += 1;
            keep
        });
        for a in &mut self.assignments {
            *a = remap[*a];
        }
        before - self.components.len()
    }

    fn check_data(&self, data: &Tensor) -> Result<()> {
        if data.rows() != self.assignments.len() {
            return Err(Error::Input(format!(
                "mixture holds {} assignments but data has {} rows",
                self.assignments.len(),
                data.rows()
            )));
        }
        Ok(())
    }

    /// Common latent noise for a batch, shared by every component.
    pub fn draw_noise(&self, rows: usize, samples: usize, rng: &mut RngStream) -> Vec<Tensor> {
        let k = self.base.config().latent_dim;
        (0..samples).map(|_| rng.normal_tensor(&[rows, k])).collect()
    }

    /// Per-component expected log-likelihoods, `[C][rows]`, with shared
    /// noise `eps`.
    pub fn log_likelihoods(&self, x: &Tensor, eps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        self.components
            .iter()
            .map(|c| c.model.expected_log_likelihood(x, eps))
            .collect()
    }

    /// Per-component `log p(x | z = μ)`, `[C][rows]`.
    pub fn log_likelihoods_at_mean(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.components
            .iter()
            .map(|c| c.model.log_likelihood_at_mean(x))
            .collect()
    }

    /// Responsibilities `[rows][C]` with `L` reparameterized samples.
    pub fn responsibilities(&self, x: &Tensor, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
        let eps = self.draw_noise(x.rows(), self.config.mc_samples, rng);
        transpose_softmax(&self.log_likelihoods(x, &eps)?)
    }

    /// Noise-free responsibilities `[rows][C]` at `z = μ`.
    pub fn responsibilities_at_mean(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        transpose_softmax(&self.log_likelihoods_at_mean(x)?)
    }

    /// One forget step on the leavers and one learn step on the joiners of
    /// component `c`, then clears its change sets.
    pub fn forget_learn_update(&mut self, c: usize, data: &Tensor) -> Result<()> {
        let sweep = self.sweeps_done;
        let comp = &mut self.components[c];
        let ctx = |e: Error| e.with_training_context(sweep, Some(c));
        if !comp.removed.is_empty() {
            let x = data.select_rows(&comp.removed)?;
            comp.model
                .train_step(&x, &mut comp.rng, UpdateDirection::Forget)
                .map_err(ctx)?;
        }
        if !comp.added.is_empty() {
            let x = data.select_rows(&comp.added)?;
            comp.model
                .train_step(&x, &mut comp.rng, UpdateDirection::Learn)
                .map_err(ctx)?;
        }
        comp.added.clear();
        comp.removed.clear();
        Ok(())
    }

    /// Parameter block: `component_steps` learn steps per component on
    /// minibatches of its own instances.
    pub fn optimize_components(&mut self, data: &Tensor) -> Result<()> {
        self.check_data(data)?;
        let sweep = self.sweeps_done;
        let batch_size = self.config.batch_size;
        let steps = self.config.component_steps;
        for c in 0..self.components.len() {
            let members = self.members(c);
            if members.is_empty() {
                continue;
            }
            let comp = &mut self.components[c];
            let mut order = members.clone();
            let mut cursor = order.len();
            for _ in 0..steps {
                let batch: Vec<usize> = if members.len() <= batch_size {
                    members.clone()
                } else {
                    if cursor + batch_size > order.len() {
                        comp.rng.shuffle(&mut order);
                        cursor = 0;
                    }
                    cursor += batch_size;
                    order[cursor - batch_size..cursor].to_vec()
                };
                let x = data.select_rows(&batch)?;
                comp.model
                    .train_step(&x, &mut comp.rng, UpdateDirection::Learn)
                    .map_err(|e| e.with_training_context(sweep, Some(c)))?;
            }
        }
        Ok(())
    }

    /// One pass over all instances in a fresh random order, resampling each
    /// assignment; then removes empty components and applies forget/learn.
    pub fn gibbs_sweep(&mut self, data: &Tensor, selection: Selection) -> Result<SweepStats> {
        self.check_data(data)?;
        let n = data.rows();
        let mut stats = SweepStats {
            components_before: self.components.len(),
            ..Default::default()
        };
        // Parameters are fixed during the pass, so likelihoods are computed
        // once. Spawned components copy the base, whose likelihoods are
        // computed on first spawn.
        let (mut ll, eps, order) = match selection {
            Selection::Sample => {
                let k = self.base.config().latent_dim;
                let eps: Vec<Tensor> = (0..self.config.mc_samples)
                    .map(|_| self.gibbs_rng.normal_tensor(&[n, k]))
                    .collect();
                let ll = self.log_likelihoods(data, &eps)?;
                let order = self.gibbs_rng.permutation(n);
                (ll, Some(eps), order)
            }
            Selection::Argmax => (self.log_likelihoods_at_mean(data)?, None, (0..n).collect()),
        };
        let mut base_ll: Option<Vec<f64>> = None;
        let allow_spawn = self.config.spawn && selection == Selection::Sample;

        let mut logits = Vec::with_capacity(self.components.len());
        for i in order {
            logits.clear();
            logits.extend(ll.iter().map(|row| row[i]));
            let resp = softmax(&logits)?;
            let dist = AssignmentDistribution::new(n, self.config.alpha, &resp)?;
            let choice = match selection {
                Selection::Sample if allow_spawn => dist.sample(&mut self.gibbs_rng),
                Selection::Sample => Assignment::Existing(sample_weights(&resp, &mut self.gibbs_rng)),
                Selection::Argmax => dist.argmax(false),
            };
            let target = match choice {
                Assignment::Existing(c) => c,
                Assignment::Spawn if self.components.len() >= self.config.c_max => {
                    sample_weights(&resp, &mut self.gibbs_rng)
                }
                Assignment::Spawn => {
                    let c = self.spawn_component()?;
                    stats.spawns += 1;
                    if base_ll.is_none() {
                        let eps = eps.as_deref().expect("spawning only while sampling");
                        base_ll = Some(self.base.expected_log_likelihood(data, eps)?);
                    }
                    ll.push(base_ll.clone().expect("computed above"));
                    c
                }
            };
            if target != self.assignments[i] {
                self.reassign(i, target);
                stats.reassignments += 1;
            }
        }

        stats.removals = self.remove_empty();
        for c in 0..self.components.len() {
            stats.added_total += self.components[c].added.len();
            stats.removed_total += self.components[c].removed.len();
            self.forget_learn_update(c, data)?;
        }
        stats.components_after = self.components.len();
        Ok(stats)
    }

    /// Forces each labeled instance `(row, class)` onto component `class`,
    /// then runs one forget/learn pass.
    pub fn seed_assignments_with_labels(&mut self, data: &Tensor, labeled: &[(usize, usize)]) -> Result<()> {
        self.check_data(data)?;
        let c = self.components.len();
        for &(i, y) in labeled {
            if y >= c {
                return Err(Error::Input(format!("label {y} has no component (C = {c})")));
            }
            if i >= self.assignments.len() {
                return Err(Error::Input(format!("labeled row {i} out of range")));
            }
        }
        for &(i, y) in labeled {
            self.reassign(i, y);
        }
        for c in 0..self.components.len() {
            self.forget_learn_update(c, data)?;
        }
        Ok(())
    }

    /// Mean per-instance ELBO, reconstruction term and KL under the
    /// assigned components, using the fixed monitoring noise stream.
    pub fn monitor(&self, data: &Tensor) -> Result<(f64, f64, f64)> {
        self.check_data(data)?;
        let n = data.rows();
        let mut rng = RngStream::new(self.seed, streams::MONITOR);
        let eps = self.draw_noise(n, self.config.mc_samples, &mut rng);
        let (mut recon, mut kl) = (0.0, 0.0);
        for c in 0..self.components.len() {
            let members = self.members(c);
            if members.is_empty() {
                continue;
            }
            let x = data.select_rows(&members)?;
            let e: Vec<Tensor> = eps.iter().map(|t| t.select_rows(&members)).collect::<Result<_>>()?;
            let model = &self.components[c].model;
            recon += model.expected_log_likelihood(&x, &e)?.iter().sum::<f64>();
            kl += kl_diag_gaussian(&model.encode(&x)?).iter().sum::<f64>();
        }
        let (recon, kl) = (recon / n as f64, kl / n as f64);
        Ok((recon - kl, recon, kl))
    }

    /// Runs parameter blocks and Gibbs sweeps until the ELBO stalls for
    /// `patience` sweeps or `max_sweeps` is reached. Resumes from the
    /// current sweep counter. `observer` sees the state after every sweep.
    pub fn run(
        &mut self,
        data: &Tensor,
        observer: &mut dyn FnMut(&MixtureState, &SweepReport) -> Result<()>,
    ) -> Result<()> {
        self.run_until(data, usize::MAX, observer).map(|_| ())
    }

    /// Like [`MixtureState::run`] but also stops once `sweep_limit` sweeps
    /// are done. Returns true when the sampler has finished: converged or
    /// out of sweeps.
    pub fn run_until(
        &mut self,
        data: &Tensor,
        sweep_limit: usize,
        observer: &mut dyn FnMut(&MixtureState, &SweepReport) -> Result<()>,
    ) -> Result<bool> {
        self.check_data(data)?;
        while !self.is_finished() && self.sweeps_done < sweep_limit {
            self.optimize_components(data)?;
            let stats = self.gibbs_sweep(data, Selection::Sample)?;
            self.sweeps_done += 1;
            let (elbo, recon, kl) = self.monitor(data)?;
            if !elbo.is_finite() {
                return Err(Error::NonFinite {
                    value: elbo,
                    batch: self.sweeps_done,
                    component: None,
                });
            }
            if let Some(prev) = self.last_elbo {
                if ((elbo - prev) / prev.abs().max(1e-12)).abs() < self.config.convergence_tol {
                    self.stalled += 1;
                } else {
                    self.stalled = 0;
                }
            }
            self.last_elbo = Some(elbo);
            self.converged = self.stalled >= self.config.patience;
            let report = SweepReport {
                sweep: self.sweeps_done,
                stats,
                elbo,
                recon,
                kl,
                converged: self.converged,
            };
            observer(self, &report)?;
        }
        Ok(self.is_finished())
    }

    pub fn is_finished(&self) -> bool {
        self.converged || self.sweeps_done >= self.config.max_sweeps
    }

    /// Zero-temperature sweeps without spawning until no instance moves.
    /// Returns the total number of reassignments.
    pub fn finalize(&mut self, data: &Tensor) -> Result<usize> {
        let mut total = 0;
        for _ in 0..self.config.finalize_passes {
            let stats = self.gibbs_sweep(data, Selection::Argmax)?;
            total += stats.reassignments;
            if stats.reassignments == 0 {
                break;
            }
        }
        Ok(total)
    }

    /// Responsibility-weighted mean of per-component expected
    /// reconstructions, each averaged over `n_samples` latent draws.
    pub fn expected_reconstruction(&self, x: &Tensor, rng: &mut RngStream, n_samples: usize) -> Result<Tensor> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if self.components.len() == 1 {
            return self.components[0]
                .model
                .expected_reconstruction_single(x, rng, n_samples);
        }
        let resp = self.responsibilities(x, rng)?;
        let eps = self.draw_noise(x.rows(), n_samples, rng);
        self.weighted_reconstruction(x, &resp, &eps)
    }

    /// Responsibility-weighted combination with given responsibilities `[rows][C]`
    /// and shared noise.
    pub fn weighted_reconstruction(&self, x: &Tensor, resp: &[Vec<f64>], eps: &[Tensor]) -> Result<Tensor> {
        let d = x.cols();
        let mut out = vec![0.0; x.len()];
        for (c, comp) in self.components.iter().enumerate() {
            let rec = comp.model.expected_reconstruction_with_noise(x, eps)?;
            for (i, (o, r)) in out.chunks_exact_mut(d).zip(rec.data().chunks_exact(d)).enumerate() {
                let w = resp[i][c];
                for (a, &v) in o.iter_mut().zip(r) {
                    *a += w * v;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// One row per (instance, component): encoder moments and the
    /// noise-free responsibility.
    pub fn export_latent_stats(&self, x: &Tensor) -> Result<Vec<crate::data::csvio::LatentRow>> {
        let resp = self.responsibilities_at_mean(x)?;
        let latents: Vec<_> = self
            .components
            .iter()
            .map(|c| c.model.encode(x))
            .collect::<Result<_>>()?;
        let mut rows = Vec::with_capacity(x.rows() * self.components.len());
        for (i, r) in resp.iter().enumerate() {
            for (c, q) in latents.iter().enumerate() {
                rows.push(crate::data::csvio::LatentRow {
                    instance_id: i,
                    component_id: c,
                    mu: q.mu.row(i).to_vec(),
                    sigma: q.sigma.row(i).to_vec(),
                    responsibility: r[c],
                });
            }
        }
        Ok(rows)
    }

    /// Mean `‖x − E[x]‖₂` over rows.
    pub fn mean_reconstruction_error(&self, x: &Tensor, rng: &mut RngStream, n_samples: usize) -> Result<f64> {
        let rec = self.expected_reconstruction(x, rng, n_samples)?;
        Ok(row_l2_errors(x, &rec)?.iter().sum::<f64>() / x.rows() as f64)
    }
}

/// Single-start fit: one copy of `base`, sampling sweeps until
/// convergence, then zero-temperature finalization.
pub fn fit(
    base: VaeModel,
    data: &Tensor,
    config: MixtureConfig,
    seed: u64,
    observer: &mut dyn FnMut(&MixtureState, &SweepReport) -> Result<()>,
) -> Result<MixtureState> {
    let mut state = MixtureState::new(base, data.rows(), 1, config, seed)?;
    state.run(data, observer)?;
    state.finalize(data)?;
    Ok(state)
}

/// `‖x_i − r_i‖₂` per row.
pub fn row_l2_errors(x: &Tensor, reconstruction: &Tensor) -> Result<Vec<f64>> {
    x.expect_same_shape(reconstruction, "reconstruction error")?;
    let d = x.cols();
    Ok(x.data()
        .chunks_exact(d)
        .zip(reconstruction.data().chunks_exact(d))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .collect())
}

fn transpose_softmax(ll: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let rows = ll.first().map_or(0, Vec::len);
    (0..rows)
        .map(|i| softmax(&ll.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .collect()
}

/// Encoder moments of every component for `x` with shared noise: the
/// latent codes `z_c = μ_c + σ_c ⊙ ε` for each component.
pub fn component_codes(state: &MixtureState, x: &Tensor, eps: &Tensor) -> Result<Vec<Tensor>> {
    state
        .components
        .iter()
        .map(|c| reparameterize(&c.model.encode(x)?, eps))
        .collect()
}
