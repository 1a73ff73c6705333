//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p dpvae-cli --test acceptance -- --nocapture`
//! (the harness prints regardless). Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dpvae::data::idx::{encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, IdxError};
use dpvae::data::{synth_patterns, Dataset, PatternSpec};
use dpvae::mixture::{fit, AssignmentDistribution, Assignment, MixtureConfig, MixtureState, SweepReport};
use dpvae::moe::{baseline_train, evaluate, evaluate_baseline, linear_probe, logistic_probe, vae_features, MoeConfig, MoeModel, ProbeOptions};
use dpvae::persist::Snapshot;
use dpvae::rng::streams;
use dpvae::vae::{
    kl_diag_gaussian, pretrain_base, train_vae, Architecture, DecoderKind, LatentGaussian, TrainOptions, UpdateDirection,
    VaeConfig, VaeModel,
};
use dpvae::{RngStream, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let o = f();
    let elapsed = t.elapsed();
    let in_time = elapsed <= limit;
    let pass = o.pass && in_time;
    println!(
        "{} [{id}] {name}: {} ({:.1} s, limit {} s{})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    results.push(pass);
}

fn max_relative_error(model: &VaeModel, x: &Tensor, eps: &[Tensor]) -> f64 {
    let (_, grads) = model.elbo_gradients(x, eps).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for slot in 0..model.params().len() {
        for k in 0..model.params()[slot].len() {
            let mut plus = model.clone();
            plus.params_mut()[slot].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut()[slot].data_mut()[k] -= h;
            let numeric = (plus.elbo_loss_with_noise(x, eps).unwrap().loss
                - minus.elbo_loss_with_noise(x, eps).unwrap().loss)
                / (2.0 * h);
            let a = grads[slot].data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

fn binary(rng: &mut RngStream, rows: usize, d: usize) -> Tensor {
    Tensor::new(vec![rows, d], (0..rows * d).map(|_| f64::from(u8::from(rng.uniform() < 0.5))).collect()).unwrap()
}

fn criterion_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut params = Vec::new();
    for (kind, arch) in [
        (DecoderKind::Bernoulli, Architecture::Asymmetric),
        (DecoderKind::Gaussian, Architecture::Symmetric),
    ] {
        let cfg = VaeConfig {
            latent_dim: 2,
            decoder_kind: kind,
            architecture: arch,
            ..VaeConfig::new(6, 4)
        };
        let mut rng = RngStream::new(101, 1);
        let m = VaeModel::new(cfg, &mut rng).unwrap();
        params.push(m.param_count());
        let x = match kind {
            DecoderKind::Bernoulli => binary(&mut rng, 6, 6),
            DecoderKind::Gaussian => rng.normal_tensor(&[6, 6]),
        };
        let eps = m.draw_noise(6, &mut rng);
        worst = worst.max(max_relative_error(&m, &x, &eps));
    }
    Outcome {
        pass: worst < 1e-4 && params.iter().all(|&p| p <= 200),
        detail: format!("max relative error {worst:.2e} < 1e-4, parameters {params:?}"),
    }
}

fn criterion_kl() -> Outcome {
    let mut rng = RngStream::new(202, 1);
    let samples = 100_000;
    let mut worst_z: f64 = 0.0;
    let mut ok = 0;
    for _ in 0..20 {
        let k = 3;
        let mu: Vec<f64> = (0..k).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let sigma: Vec<f64> = (0..k).map(|_| rng.uniform_range(0.2, 2.0)).collect();
        let latent = LatentGaussian {
            mu: Tensor::new(vec![1, k], mu.clone()).unwrap(),
            sigma: Tensor::new(vec![1, k], sigma.clone()).unwrap(),
        };
        let analytic = kl_diag_gaussian(&latent)[0];
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..samples {
            let mut v = 0.0;
            for j in 0..k {
                let e = rng.normal();
                let z = mu[j] + sigma[j] * e;
                // log q − log p; the 2π terms cancel.
                v += -sigma[j].ln() - 0.5 * e * e + 0.5 * z * z;
            }
            sum += v;
            sq += v * v;
        }
        let mean = sum / samples as f64;
        let se = ((sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        let z = (mean - analytic).abs() / se;
        worst_z = worst_z.max(z);
        ok += usize::from(z <= 3.0);
    }
    Outcome {
        pass: ok == 20,
        detail: format!("{ok}/20 within 3 SE, worst {worst_z:.2} SE"),
    }
}

fn criterion_assignment_algebra() -> Outcome {
    let mut rng = RngStream::new(303, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let n = 2 + rng.below(99);
        let alpha = 10.0 * (1.0 - rng.uniform());
        let c = 1 + rng.below(10);
        let raw: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
        let resp = dpvae::tensor::softmax(&raw).unwrap();
        let d = AssignmentDistribution::new(n, alpha, &resp).unwrap();
        worst = worst.max((d.total() - 1.0).abs());
    }
    let single = AssignmentDistribution::new(1, 2.0, &[1.0]).unwrap();
    let exact = single.new == 1.0 && single.existing.iter().all(|&p| p == 0.0);
    Outcome {
        pass: worst <= 1e-12 && exact,
        detail: format!("max |Σp − 1| = {worst:.1e}, n = 1 spawn probability {}", single.new),
    }
}

fn criterion_sampler() -> Outcome {
    let d = AssignmentDistribution::new(40, 2.0, &[0.5, 0.3, 0.15, 0.05]).unwrap();
    let probs: Vec<f64> = d.existing.iter().copied().chain([d.new]).collect();
    let draws = 100_000;
    let mut counts = vec![0usize; probs.len()];
    let mut rng = RngStream::new(404, 1);
    for _ in 0..draws {
        match d.sample(&mut rng) {
            Assignment::Existing(c) => counts[c] += 1,
            Assignment::Spawn => *counts.last_mut().unwrap() += 1,
        }
    }
    let mut worst: f64 = 0.0;
    for (&c, &p) in counts.iter().zip(&probs) {
        let expected = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        worst = worst.max((c as f64 - expected).abs() / sd);
    }
    Outcome {
        pass: worst <= 4.0,
        detail: format!("worst slot deviation {worst:.2}σ ≤ 4σ"),
    }
}

fn criterion_forget_learn() -> Outcome {
    let (mut forget_ok, mut learn_ok) = (0, 0);
    for rep in 0..10 {
        let mut rng = RngStream::new(500 + rep, 1);
        let (mut m, _) = {
            let data = binary(&mut rng, 200, 16);
            let opts = TrainOptions {
                max_iterations: 50,
                batch_size: 50,
                ..Default::default()
            };
            pretrain_base(VaeConfig::new(16, 8), &data, &opts, rep).unwrap()
        };
        let b = binary(&mut rng, 32, 16);
        let eps = m.draw_noise(32, &mut rng);
        let before = m.elbo_loss_with_noise(&b, &eps).unwrap().loss;
        let mut forgot = m.clone();
        forgot.train_step_with_noise(&b, &eps, UpdateDirection::Forget).unwrap();
        forget_ok += usize::from(forgot.elbo_loss_with_noise(&b, &eps).unwrap().loss >= before);
        m.train_step_with_noise(&b, &eps, UpdateDirection::Learn).unwrap();
        learn_ok += usize::from(m.elbo_loss_with_noise(&b, &eps).unwrap().loss <= before);
    }
    Outcome {
        pass: forget_ok >= 8 && learn_ok >= 8,
        detail: format!("forget raised the loss in {forget_ok}/10, learn lowered it in {learn_ok}/10 (need ≥ 8)"),
    }
}

/// Per-seed experiment on the four-pattern set: 2000 training and 1000
/// test instances drawn from the same prototypes.
struct SeedRun {
    train: Dataset,
    test: Dataset,
    base: VaeModel,
    mixture: MixtureState,
    mixture_steps: usize,
}

const HIDDEN: usize = 8;
const SWEEPS: usize = 15;

fn mixture_config() -> MixtureConfig {
    MixtureConfig {
        max_sweeps: SWEEPS,
        ..MixtureConfig::default()
    }
}

fn seed_run(seed: u64) -> SeedRun {
    let mut rng = RngStream::new(seed, streams::DATA);
    let spec = PatternSpec::random(4, 64, 3000, 0.05, &mut rng);
    let all = synth_patterns(&spec, &mut rng).unwrap();
    let (train, test) = all.split(2000, seed).unwrap();
    let (base, _) = pretrain_base(VaeConfig::new(64, HIDDEN), train.instances(), &TrainOptions::default(), seed).unwrap();
    let mut steps = 0;
    let mut observer = |_: &MixtureState, r: &SweepReport| {
        steps += r.stats.components_before * mixture_config().component_steps;
        Ok(())
    };
    let mixture = fit(base.clone(), train.instances(), mixture_config(), seed, &mut observer).unwrap();
    SeedRun {
        train,
        test,
        base,
        mixture,
        mixture_steps: steps,
    }
}

fn recon_error(state: &MixtureState, x: &Tensor, seed: u64) -> f64 {
    state
        .mean_reconstruction_error(x, &mut RngStream::new(seed, streams::EVAL), 20)
        .unwrap()
}

fn single(base: &VaeModel, n: usize, seed: u64) -> MixtureState {
    MixtureState::new(base.clone(), n, 1, mixture_config(), seed).unwrap()
}

fn criterion_table1(runs: &[SeedRun]) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let x = r.train.instances();
        let seed = seed as u64;
        let mix = recon_error(&r.mixture, x, seed);
        let base = recon_error(&single(&r.base, x.rows(), seed), x, seed);
        // Informational: the base trained further for the mixture's step budget.
        let mut longer = r.base.clone();
        let opts = TrainOptions {
            max_iterations: r.mixture_steps,
            window: usize::MAX,
            ..Default::default()
        };
        train_vae(&mut longer, x, &opts, seed + 1000, &mut RngStream::new(seed, 99)).unwrap();
        let budget = recon_error(&single(&longer, x.rows(), seed), x, seed);
        let c = r.mixture.n_components();
        let win = c >= 2 && mix < base;
        wins += usize::from(win);
        lines.push(format!(
            "seed {seed}: C={c} mixture {mix:.3} vs VAE {base:.3} (equal-budget VAE {budget:.3})"
        ));
    }
    Outcome {
        pass: wins >= 2,
        detail: format!("{wins}/3 seeds with C ≥ 2 and lower error; {}", lines.join("; ")),
    }
}

fn semisup_errors(r: &SeedRun, seed: u64, per_class: Option<usize>) -> (f64, f64, usize) {
    let labels = r.train.labels().unwrap();
    let idx: Vec<usize> = match per_class {
        Some(n) => r.train.sample_per_class(n, &mut RngStream::new(seed, streams::LABELS)).unwrap(),
        None => (0..r.train.len()).collect(),
    };
    let labeled = r.train.subset(&idx).unwrap();
    let pairs: Vec<(usize, usize)> = idx.iter().map(|&i| (i, labels[i])).collect();
    let x = r.train.instances();
    let mut state = MixtureState::new(r.base.clone(), x.rows(), 4, mixture_config(), seed).unwrap();
    state.seed_assignments_with_labels(x, &pairs).unwrap();
    state.run(x, &mut |_, _| Ok(())).unwrap();
    state.finalize(x).unwrap();
    let c = state.n_components();
    let cfg = MoeConfig::new(HIDDEN, 4);
    let y = labeled.labels().unwrap();
    let init = |experts| MoeModel::from_encoder(&r.base, experts, cfg.clone(), &mut RngStream::new(seed, streams::DISCRIMINATIVE)).unwrap();
    let mut moe = init(c);
    moe.train(&state, labeled.instances(), y, &mut RngStream::new(seed, streams::EVAL)).unwrap();
    let (baseline, _) = baseline_train(init(1), labeled.instances(), y, &mut RngStream::new(seed, streams::EVAL)).unwrap();
    (
        evaluate(&moe, &state, &r.test).unwrap().error_rate,
        evaluate_baseline(&baseline, &r.test).unwrap().error_rate,
        c,
    )
}

fn criterion_semisup(runs: &[SeedRun]) -> Outcome {
    let mut few = (0.0, 0.0);
    let mut all = (0.0, 0.0);
    for (seed, r) in runs.iter().enumerate() {
        let (m, b, _) = semisup_errors(r, seed as u64, Some(5));
        few = (few.0 + m / 3.0, few.1 + b / 3.0);
        let (m, b, _) = semisup_errors(r, seed as u64, None);
        all = (all.0 + m / 3.0, all.1 + b / 3.0);
    }
    let gap = (all.0 - all.1).abs() * 100.0;
    Outcome {
        pass: few.0 <= few.1 && gap <= 0.5,
        detail: format!(
            "5 labels/class: MoE {:.2}% vs baseline {:.2}%; all labels: MoE {:.2}% vs baseline {:.2}% (gap {gap:.2} points ≤ 0.5)",
            few.0 * 100.0,
            few.1 * 100.0,
            all.0 * 100.0,
            all.1 * 100.0
        ),
    }
}

fn criterion_probe(runs: &[SeedRun]) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    let opts = ProbeOptions::default();
    for (seed, r) in runs.iter().enumerate() {
        let idx = r
            .train
            .sample_per_class(25, &mut RngStream::new(seed as u64, streams::LABELS))
            .unwrap();
        let labeled = r.train.subset(&idx).unwrap();
        let mix = linear_probe(&r.mixture, &labeled, &r.test, &opts).unwrap();
        let single = logistic_probe(
            &vae_features(&r.base, labeled.instances()).unwrap(),
            labeled.labels().unwrap(),
            &vae_features(&r.base, r.test.instances()).unwrap(),
            r.test.labels().unwrap(),
            4,
            &opts,
        )
        .unwrap();
        wins += usize::from(mix >= single);
        lines.push(format!("seed {seed}: mixture {mix:.4} vs VAE {single:.4}"));
    }
    Outcome {
        pass: wins >= 2,
        detail: format!("{wins}/3 seeds with mixture ≥ VAE at 100 labels; {}", lines.join("; ")),
    }
}

fn cli_run(dir: &Path, cfg: &Path, cmd: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dpvae"))
        .env_remove(dpvae_cli::OUT_DIR_ENV)
        .arg("--config")
        .arg(cfg)
        .arg("--out-dir")
        .arg(dir)
        .arg(cmd)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn criterion_determinism(run: &SeedRun) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "seed = 3\nhidden_dim = 8\nmax_iterations = 200\nmax_sweeps = 3\n[data]\nkind = \"synthetic\"\nclasses = 4\ndim = 64\ncount = 500\nflip_rate = 0.05\n",
    )
    .unwrap();
    let mut identical = true;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        identical &= cli_run(d, &cfg, "pretrain") && cli_run(d, &cfg, "fit-mixture");
    }
    for f in ["metrics.csv", "mixture.ckpt"] {
        identical &= std::fs::read(dirs[0].join(f)).ok() == std::fs::read(dirs[1].join(f)).ok();
    }

    let path = tmp.path().join("probe.ckpt");
    let x = run.test.instances().select_rows(&(0..64).collect::<Vec<_>>()).unwrap();
    let state = &run.mixture;
    let moe = MoeModel::from_encoder(&run.base, state.n_components(), MoeConfig::new(HIDDEN, 4), &mut RngStream::new(1, 1)).unwrap();
    Snapshot {
        vae: Some(run.base.clone()),
        mixture: Some(state.clone()),
        moe: Some(moe.clone()),
    }
    .save(&path, serde_json::json!({"probe": true}))
    .unwrap();
    let (back, _) = Snapshot::load(&path).unwrap();
    let (m2, moe2, base2) = (back.mixture.unwrap(), back.moe.unwrap(), back.vae.unwrap());
    let recon = |s: &MixtureState| s.expected_reconstruction(&x, &mut RngStream::new(9, 9), 5).unwrap();
    let exact = recon(state) == recon(&m2)
        && state.responsibilities_at_mean(&x).unwrap() == m2.responsibilities_at_mean(&x).unwrap()
        && state.export_latent_stats(&x).unwrap() == m2.export_latent_stats(&x).unwrap()
        && moe.predict(state, &x).unwrap() == moe2.predict(&m2, &x).unwrap()
        && run.base.encode(&x).unwrap() == base2.encode(&x).unwrap();
    Outcome {
        pass: identical && exact,
        detail: format!("metrics/checkpoint byte-identical across runs: {identical}; round trip bit-exact on probe batch: {exact}"),
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DPVAE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

fn criterion_idx() -> Outcome {
    if let Some(dir) = mnist_dir() {
        let train = load_idx(&dir.join("train-images-idx3-ubyte"), Some(&dir.join("train-labels-idx1-ubyte"))).unwrap();
        let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), Some(&dir.join("t10k-labels-idx1-ubyte"))).unwrap();
        let shapes = (train.instances().shape().to_vec(), test.instances().shape().to_vec());
        let labels_ok = [&train, &test]
            .iter()
            .all(|d| d.labels().unwrap().iter().all(|&y| y <= 9));
        return Outcome {
            pass: shapes == (vec![60000, 784], vec![10000, 784]) && labels_ok,
            detail: format!("MNIST shapes {:?} / {:?}, labels in 0..=9: {labels_ok}", shapes.0, shapes.1),
        };
    }
    let images = Tensor::new(vec![2, 4], vec![0.0, 1.0, 128.0 / 255.0, 1.0 / 255.0, 1.0, 0.0, 0.0, 64.0 / 255.0]).unwrap();
    let bytes = encode_idx_images(&images, 2, 2).unwrap();
    let parsed = parse_idx_images(&bytes).unwrap();
    let labels = parse_idx_labels(&encode_idx_labels(&[3, 9])).unwrap();
    let wrong_magic = matches!(parse_idx_labels(&bytes), Err(IdxError::WrongMagic { .. }));
    let truncated = matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(IdxError::Truncated { .. }));
    Outcome {
        pass: parsed == images && labels == [3, 9] && wrong_magic && truncated,
        detail: format!(
            "MNIST files absent, fixture stands in: shape {:?}, labels {labels:?}, wrong magic rejected {wrong_magic}, truncation rejected {truncated}",
            parsed.shape()
        ),
    }
}

fn main() {
    let mut results = Vec::new();
    let secs = Duration::from_secs;
    report(&mut results, 1, "gradient correctness", secs(30), criterion_gradients);
    report(&mut results, 2, "KL correctness", secs(30), criterion_kl);
    report(&mut results, 3, "assignment algebra", secs(1), criterion_assignment_algebra);
    report(&mut results, 4, "sampler fidelity", secs(10), criterion_sampler);

    let t = Instant::now();
    let runs: Vec<SeedRun> = (0..3).map(seed_run).collect();
    let shared = t.elapsed();
    println!("      shared pre-training and mixture fits for 3 seeds: {:.1} s", shared.as_secs_f64());
    // The shared fits count against both criteria that use them.
    report(&mut results, 5, "reconstruction trend", secs(600).saturating_sub(shared), || criterion_table1(&runs));
    report(&mut results, 6, "semi-supervised gain", secs(600).saturating_sub(shared), || criterion_semisup(&runs));
    report(&mut results, 7, "forget/learn contract", secs(60), criterion_forget_learn);
    report(&mut results, 8, "determinism and persistence", secs(60), || criterion_determinism(&runs[0]));
    report(&mut results, 9, "linear-probe ordering", secs(300).saturating_sub(shared), || criterion_probe(&runs));
    report(&mut results, 10, "IDX ingestion", secs(30), criterion_idx);

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
