//! Subcommand implementations.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpvae::data::csvio::{load_csv_dataset, write_latent_stats, write_table};
use dpvae::data::idx::load_idx;
use dpvae::data::metrics::{format_float, MetricsRecord, MetricsWriter};
use dpvae::data::{binarize, synth_patterns, Dataset, PatternSpec};
use dpvae::mixture::{row_l2_errors, MixtureConfig, MixtureState, SweepReport};
use dpvae::moe::{baseline_train, evaluate, evaluate_baseline, linear_probe, MoeModel, ProbeOptions};
use dpvae::persist::Snapshot;
use dpvae::rng::streams;
use dpvae::vae::pretrain_base;
use dpvae::RngStream;

use crate::config::{DataSource, LabelBudget, RunConfig};
use crate::report::{ExperimentReport, TrialResult};
use crate::{CliError, Command};

pub const BASE_CKPT: &str = "base.ckpt";
pub const MIXTURE_CKPT: &str = "mixture.ckpt";
pub const MOE_CKPT: &str = "moe.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SWEEPS_CSV: &str = "sweeps.csv";

const SWEEPS_HEADER: &str =
    "run_id,sweep,components_before,components_after,reassignments,spawns,removals,elbo,recon,kl";

pub fn dispatch(cfg: &RunConfig, command: Command) -> Result<(), CliError> {
    let out = out_dir(cfg)?;
    match command {
        Command::Pretrain => pretrain(cfg, &out),
        Command::FitMixture {
            base,
            resume,
            stop_after,
        } => fit_mixture(cfg, &out, base, resume, stop_after),
        Command::TrainSemisup { mixture } => train_semisup(cfg, &out, mixture).map(|_| ()),
        Command::Reconstruct {
            checkpoint,
            input,
            samples,
        } => reconstruct(cfg, &out, checkpoint, input, samples),
        Command::ExportLatents { checkpoint, input } => export_latents(cfg, &out, checkpoint, input),
        Command::Eval { checkpoint } => eval(cfg, &out, checkpoint),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn echo_line(cfg: &RunConfig) -> String {
    serde_json::to_string(&cfg.echo()).expect("config is serializable")
}

fn metrics(cfg: &RunConfig, out: &Path) -> Result<MetricsWriter, CliError> {
    Ok(MetricsWriter::open(&out.join(METRICS_CSV), &echo_line(cfg))?)
}

fn record(cfg: &RunConfig, phase: &str, step: u64, started: Instant) -> MetricsRecord {
    let mut r = MetricsRecord::new(cfg.run_id.clone(), phase, step);
    if cfg.wall_clock {
        r.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    r
}

/// Training and (optional) test sets described by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [data] section".into()))?;
    let maybe_binarize = |d: Dataset, t: Option<f64>| -> Result<Dataset, CliError> {
        Ok(match t {
            Some(t) => binarize(&d, t)?,
            None => d,
        })
    };
    match source {
        DataSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
            binarize: t,
        } => {
            require_file(images, "image file")?;
            if let Some(l) = labels {
                require_file(l, "label file")?;
            }
            let train = maybe_binarize(load_idx(images, labels.as_deref())?, *t)?;
            let test = match test_images {
                Some(ti) => {
                    require_file(ti, "test image file")?;
                    if let Some(l) = test_labels {
                        require_file(l, "test label file")?;
                    }
                    Some(maybe_binarize(load_idx(ti, test_labels.as_deref())?, *t)?)
                }
                None => None,
            };
            Ok((train, test))
        }
        DataSource::Csv {
            train,
            test,
            binarize: t,
        } => {
            require_file(train, "training CSV")?;
            let tr = maybe_binarize(load_csv_dataset(train)?, *t)?;
            let te = match test {
                Some(p) => {
                    require_file(p, "test CSV")?;
                    Some(maybe_binarize(load_csv_dataset(p)?, *t)?)
                }
                None => None,
            };
            Ok((tr, te))
        }
        DataSource::Synthetic {
            classes,
            dim,
            count,
            test_count,
            flip_rate,
        } => {
            let mut rng = RngStream::new(cfg.seed, streams::DATA);
            let spec = PatternSpec::random(*classes, *dim, *count, *flip_rate, &mut rng);
            let train = synth_patterns(&spec, &mut rng)?;
            let test = if *test_count > 0 {
                let counts = (0..*classes)
                    .map(|c| test_count / classes + usize::from(c < test_count % classes))
                    .collect();
                let test_spec = PatternSpec { counts, ..spec };
                Some(synth_patterns(&test_spec, &mut rng)?)
            } else {
                None
            };
            Ok((train, test))
        }
    }
}

/// Loads the rows to operate on: a CSV given on the command line, else the
/// configured training set.
fn input_rows(cfg: &RunConfig, input: Option<PathBuf>) -> Result<Dataset, CliError> {
    match input {
        Some(p) => {
            require_file(&p, "input CSV")?;
            Ok(load_csv_dataset(&p)?)
        }
        None => Ok(load_data(cfg)?.0),
    }
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (train, _) = load_data(cfg)?;
    let vcfg = cfg.vae_config(train.dim());
    let (model, curve) = pretrain_base(vcfg, train.instances(), &cfg.train_options(), cfg.seed)?;
    let mut m = metrics(cfg, out)?;
    for (i, loss) in curve.losses.iter().enumerate() {
        let mut r = record(cfg, "pretrain", i as u64 + 1, started);
        r.elbo = Some(-loss);
        m.emit(&r)?;
    }
    Snapshot {
        vae: Some(model),
        ..Default::default()
    }
    .save(&out.join(BASE_CKPT), cfg.echo())?;
    println!(
        "pretrain: {} steps, final loss {}, converged {}",
        curve.losses.len(),
        curve.losses.last().map_or("-".into(), |l| format_float(*l)),
        curve.converged
    );
    Ok(())
}

/// Drops rows a resumed run will write again: rows of `run_id` whose step
/// column exceeds `keep_through`, plus any final summary row. With an empty
/// `phases` list every row of the run is considered.
fn rewind_rows(path: &Path, run_id: &str, phases: &[&str], step_col: usize, keep_through: u64) -> Result<(), CliError> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut body = String::with_capacity(text.len());
    for line in text.lines() {
        let cells: Vec<&str> = line.split(',').collect();
        let phase = cells.get(1).copied().unwrap_or("");
        let ours = cells[0] == run_id && (phases.is_empty() || phases.contains(&phase));
        let later = cells.get(step_col).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s > keep_through);
        if !(ours && (later || phase == "mixture-final")) {
            body.push_str(line);
            body.push('\n');
        }
    }
    std::fs::write(path, body).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn append_sweep_row(path: &Path, run_id: &str, r: &SweepReport) -> Result<(), CliError> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let s = &r.stats;
    let mut line = String::new();
    if fresh {
        line.push_str(SWEEPS_HEADER);
        line.push('\n');
    }
    line.push_str(&format!(
        "{run_id},{},{},{},{},{},{},{},{},{}\n",
        r.sweep,
        s.components_before,
        s.components_after,
        s.reassignments,
        s.spawns,
        s.removals,
        format_float(r.elbo),
        format_float(r.recon),
        format_float(r.kl)
    ));
    f.write_all(line.as_bytes())
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn fit_mixture(
    cfg: &RunConfig,
    out: &Path,
    base: Option<PathBuf>,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let (train, _) = load_data(cfg)?;
    let x = train.instances();
    let ckpt_path = out.join(MIXTURE_CKPT);
    let mut state = if resume && ckpt_path.is_file() {
        let (snap, _) = Snapshot::load(&ckpt_path)?;
        let state = snap
            .mixture
            .ok_or_else(|| CliError::Usage(format!("{} holds no mixture", ckpt_path.display())))?;
        let done = state.sweeps_done() as u64;
        rewind_rows(&out.join(METRICS_CSV), &cfg.run_id, &["mixture", "mixture-final"], 2, done)?;
        rewind_rows(&out.join(SWEEPS_CSV), &cfg.run_id, &[], 1, done)?;
        state
    } else {
        let base_path = base.unwrap_or_else(|| out.join(BASE_CKPT));
        require_file(&base_path, "base checkpoint")?;
        let (snap, _) = Snapshot::load(&base_path)?;
        let base = snap
            .vae
            .ok_or_else(|| CliError::Usage(format!("{} holds no VAE", base_path.display())))?;
        rewind_rows(&out.join(METRICS_CSV), &cfg.run_id, &["mixture", "mixture-final"], 2, 0)?;
        rewind_rows(&out.join(SWEEPS_CSV), &cfg.run_id, &[], 1, 0)?;
        new_mixture(cfg, &train, base)?
    };

    let mut m = metrics(cfg, out)?;
    let sweeps_path = out.join(SWEEPS_CSV);
    let echo = cfg.echo();
    let mut observer = |s: &MixtureState, r: &SweepReport| -> dpvae::Result<()> {
        let mut rec = record(cfg, "mixture", r.sweep as u64, started);
        rec.component_count = Some(s.n_components());
        rec.elbo = Some(r.elbo);
        rec.recon_error = Some(-r.recon);
        rec.kl = Some(r.kl);
        m.emit(&rec)?;
        append_sweep_row(&sweeps_path, &cfg.run_id, r).map_err(|e| dpvae::Error::Input(e.to_string()))?;
        Snapshot {
            mixture: Some(s.clone()),
            ..Default::default()
        }
        .save(&ckpt_path, echo.clone())
    };
    let finished = state.run_until(x, stop_after.unwrap_or(usize::MAX), &mut observer)?;
    if !finished {
        println!("fit-mixture: stopped after sweep {} (C = {})", state.sweeps_done(), state.n_components());
        return Ok(());
    }
    let moved = state.finalize(x)?;
    let (elbo, recon, kl) = state.monitor(x)?;
    let mut rec = record(cfg, "mixture-final", state.sweeps_done() as u64, started);
    rec.component_count = Some(state.n_components());
    rec.elbo = Some(elbo);
    rec.recon_error = Some(-recon);
    rec.kl = Some(kl);
    m.emit(&rec)?;
    Snapshot {
        mixture: Some(state.clone()),
        ..Default::default()
    }
    .save(&ckpt_path, cfg.echo())?;
    println!(
        "fit-mixture: {} sweeps, C = {}, occupancy {:?}, {moved} moved in finalization",
        state.sweeps_done(),
        state.n_components(),
        state.occupancy()
    );
    Ok(())
}

/// Fresh mixture: one copy of the base, or one per class seeded with labels.
fn new_mixture(cfg: &RunConfig, train: &Dataset, base: dpvae::vae::VaeModel) -> Result<MixtureState, CliError> {
    let mcfg: MixtureConfig = cfg.mixture_config();
    if cfg.seed_labels_per_class == 0 {
        return Ok(MixtureState::new(base, train.len(), 1, mcfg, cfg.seed)?);
    }
    let (labels, k) = train.require_labels("label seeding")?;
    let mut rng = RngStream::new(cfg.seed, streams::LABELS);
    let idx = train.sample_per_class(cfg.seed_labels_per_class, &mut rng)?;
    let pairs: Vec<(usize, usize)> = idx.iter().map(|&i| (i, labels[i])).collect();
    let mut state = MixtureState::new(base, train.len(), k, mcfg, cfg.seed)?;
    state.seed_assignments_with_labels(train.instances(), &pairs)?;
    Ok(state)
}

fn labeled_subset(train: &Dataset, budget: LabelBudget, rng: &mut RngStream) -> Result<Dataset, CliError> {
    match budget {
        LabelBudget::All => {
            train.require_labels("semi-supervised training")?;
            Ok(train.clone())
        }
        LabelBudget::PerClass(n) => {
            let (labels, k) = train.require_labels("semi-supervised training")?;
            for c in 0..k {
                let have = labels.iter().filter(|&&y| y == c).count();
                if have < n {
                    return Err(CliError::Usage(format!(
                        "label budget {n} per class exceeds the {have} labels of class {c}"
                    )));
                }
            }
            Ok(train.subset(&train.sample_per_class(n, rng)?)?)
        }
    }
}

fn load_mixture(path: &Path) -> Result<(MixtureState, Option<MoeModel>), CliError> {
    require_file(path, "checkpoint")?;
    let (snap, _) = Snapshot::load(path)?;
    match (snap.mixture, snap.vae) {
        (Some(m), _) => Ok((m, snap.moe)),
        (None, Some(v)) => Err(CliError::Usage(format!(
            "{} holds a single VAE (hidden {}), not a mixture",
            path.display(),
            v.config().hidden_dim
        ))),
        (None, None) => Err(CliError::Usage(format!("{} holds no mixture", path.display()))),
    }
}

pub fn train_semisup(cfg: &RunConfig, out: &Path, mixture: Option<PathBuf>) -> Result<ExperimentReport, CliError> {
    let started = Instant::now();
    let (train, test) = load_data(cfg)?;
    let test = test.ok_or_else(|| CliError::Usage("train-semisup needs a test set in [data]".into()))?;
    let (state, _) = load_mixture(&mixture.unwrap_or_else(|| out.join(MIXTURE_CKPT)))?;
    let (_, k) = train.require_labels("semi-supervised training")?;
    let c = state.n_components();
    let mut m = metrics(cfg, out)?;
    let mut results = Vec::new();
    let mut last_moe = None;
    for trial in 0..cfg.trials {
        let trial_seed = cfg.seed.wrapping_add(trial as u64);
        let labeled = labeled_subset(&train, cfg.label_budget, &mut RngStream::new(trial_seed, streams::LABELS))?;
        let y = labeled.labels().expect("labeled subset");
        let mcfg = cfg.moe_config(k);

        let init = |experts| MoeModel::from_encoder(state.base(), experts, mcfg.clone(), &mut RngStream::new(trial_seed, streams::DISCRIMINATIVE));
        let mut moe = init(c)?;
        moe.train(&state, labeled.instances(), y, &mut RngStream::new(trial_seed, streams::EVAL))?;
        let (baseline, _) = baseline_train(init(1)?, labeled.instances(), y, &mut RngStream::new(trial_seed, streams::EVAL))?;

        for (arm, report) in [
            ("moe", evaluate(&moe, &state, &test)?),
            ("baseline", evaluate_baseline(&baseline, &test)?),
        ] {
            let mut rec = record(cfg, &format!("semisup-{arm}"), trial as u64, started);
            rec.component_count = Some(if arm == "moe" { c } else { 1 });
            rec.error_rate = Some(report.error_rate);
            m.emit(&rec)?;
            results.push(TrialResult {
                trial,
                arm: arm.into(),
                labeled: labeled.len(),
                error_rate: report.error_rate,
                log_loss: report.log_loss,
            });
        }
        last_moe = Some(moe);
    }
    let report = ExperimentReport::new(results, c);
    write_table(
        &out.join("semisup_trials.csv"),
        &["trial", "moe", "labeled", "error_rate", "log_loss"].map(String::from),
        report.trials.iter().map(|t| {
            vec![
                t.trial as f64,
                f64::from(u8::from(t.arm == "moe")),
                t.labeled as f64,
                t.error_rate,
                t.log_loss,
            ]
        }),
    )?;
    Snapshot {
        mixture: Some(state),
        moe: last_moe,
        ..Default::default()
    }
    .save(&out.join(MOE_CKPT), cfg.echo())?;
    for s in &report.summaries {
        println!(
            "{}: error {} ± {} over {} trials (C = {})",
            s.arm,
            format_float(s.mean_error),
            format_float(s.std_error),
            s.trials,
            c
        );
    }
    Ok(report)
}

/// A mixture from a mixture checkpoint, or a one-component mixture around
/// the VAE of a base checkpoint.
fn mixture_or_single(cfg: &RunConfig, path: &Path, n: usize) -> Result<MixtureState, CliError> {
    require_file(path, "checkpoint")?;
    let (snap, _) = Snapshot::load(path)?;
    match (snap.mixture, snap.vae) {
        (Some(m), _) => Ok(m),
        (None, Some(v)) => Ok(MixtureState::new(v, n, 1, cfg.mixture_config(), cfg.seed)?),
        (None, None) => Err(CliError::Usage(format!("{} holds no generative model", path.display()))),
    }
}

pub fn reconstruct(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    samples: usize,
) -> Result<(), CliError> {
    let rows = input_rows(cfg, input)?;
    let x = rows.instances();
    let state = mixture_or_single(cfg, &checkpoint.unwrap_or_else(|| out.join(MIXTURE_CKPT)), x.rows())?;
    let rec = state.expected_reconstruction(x, &mut RngStream::new(cfg.seed, streams::EVAL), samples)?;
    let errors = row_l2_errors(x, &rec)?;
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x_{j}")).collect();
    write_table(&out.join("reconstruction.csv"), &header, (0..x.rows()).map(|i| rec.row(i).to_vec()))?;
    write_table(
        &out.join("reconstruction_errors.csv"),
        &["instance_id", "l2_error"].map(String::from),
        errors.iter().enumerate().map(|(i, &e)| vec![i as f64, e]),
    )?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    println!("reconstruct: {} rows, mean error {}", errors.len(), format_float(mean));
    Ok(())
}

pub fn export_latents(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>, input: Option<PathBuf>) -> Result<(), CliError> {
    let rows = input_rows(cfg, input)?;
    let x = rows.instances();
    let state = mixture_or_single(cfg, &checkpoint.unwrap_or_else(|| out.join(MIXTURE_CKPT)), x.rows())?;
    let stats = state.export_latent_stats(x)?;
    write_latent_stats(&out.join("latents.csv"), &stats, state.base().config().latent_dim)?;
    println!("export-latents: {} rows ({} components)", stats.len(), state.n_components());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let started = Instant::now();
    let path = checkpoint.unwrap_or_else(|| {
        let moe = out.join(MOE_CKPT);
        if moe.is_file() {
            moe
        } else {
            out.join(MIXTURE_CKPT)
        }
    });
    let (state, moe) = load_mixture(&path)?;
    let (train, test) = load_data(cfg)?;
    let target = test.as_ref().unwrap_or(&train);
    let recon = state.mean_reconstruction_error(target.instances(), &mut RngStream::new(cfg.seed, streams::EVAL), 20)?;
    println!("components: {}", state.n_components());
    println!("mean reconstruction error: {}", format_float(recon));
    let mut rec = record(cfg, "eval", 0, started);
    rec.component_count = Some(state.n_components());
    rec.recon_error = Some(recon);
    if let (Some(_), Some(_)) = (train.labels(), target.labels()) {
        let labeled = labeled_subset(&train, cfg.label_budget, &mut RngStream::new(cfg.seed, streams::LABELS))?;
        let acc = linear_probe(&state, &labeled, target, &ProbeOptions::default())?;
        println!("linear probe accuracy: {}", format_float(acc));
        if let Some(moe) = &moe {
            let r = evaluate(moe, &state, target)?;
            println!("classifier error: {}", format_float(r.error_rate));
            for (c, a) in r.per_class_accuracy.iter().enumerate() {
                if let Some(a) = a {
                    println!("  class {c}: accuracy {}", format_float(*a));
                }
            }
            rec.error_rate = Some(r.error_rate);
        }
    }
    metrics(cfg, out)?.emit(&rec)?;
    Ok(())
}
