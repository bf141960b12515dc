//! Training, evaluation and ablation runs over an on-disk dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use smml_core::eval::{evaluate_all_subsets, EvalReport};
use smml_core::objective::{run_epoch, StepLosses, StepRecord, TrainConfig, TrainItem, TrainState, Variant};
use smml_core::phantom::MultiModalSample;
use smml_core::srn::{PriorProvider, PriorStack};

use crate::checkpoint::{load_branches, load_checkpoint, save_checkpoint};
use crate::dataset::{load_split, read_manifest, DatasetManifest, Split};
use crate::error::{create_dir, Error, Result};
use crate::priors::{default_prior_seed, file_prior, has_priors, oracle_for};

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_HEADER: &str =
    "step,epoch,lr,task1,task2,task_refine1,task_refine2,pc1,pc2,fc,refine1,refine2,total1,total2";

/// Normalised splits with their priors.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub train: Vec<TrainItem>,
    pub val: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
}

fn priors_for(data: &Path, manifest: &DatasetManifest, sample: &MultiModalSample, noise_rate: f64) -> Result<PriorStack> {
    if has_priors(data) {
        let dims = sample.dims().as_array();
        let per = (0..sample.modalities())
            .map(|k| file_prior(data, &sample.subject_id, k, manifest.classes, dims))
            .collect::<Result<Vec<_>>>()?;
        return Ok(PriorStack::from_modalities(&per)?);
    }
    let oracle = oracle_for(manifest, noise_rate, default_prior_seed(manifest));
    Ok(oracle.priors(sample)?)
}

/// Loads the dataset at `data`. Priors come from the cache written by
/// `build-priors` when present, otherwise from the synthetic oracle at
/// `cfg.prior_noise_rate`.
pub fn prepare(data: &Path, cfg: &TrainConfig) -> Result<Prepared> {
    let manifest = read_manifest(data)?;
    if manifest.modalities != cfg.arch.modalities || manifest.classes != cfg.arch.classes {
        return Err(Error::config(
            "train.arch",
            format!(
                "model expects K={} C={}, dataset has K={} C={}",
                cfg.arch.modalities, cfg.arch.classes, manifest.modalities, manifest.classes
            ),
        ));
    }
    let train = load_split(data, &manifest, Split::Train)?
        .iter()
        .map(|s| Ok(TrainItem { priors: priors_for(data, &manifest, s, cfg.prior_noise_rate)?, sample: s.normalized() }))
        .collect::<Result<Vec<_>>>()?;
    let norm = |split| -> Result<Vec<MultiModalSample>> {
        Ok(load_split(data, &manifest, split)?.iter().map(MultiModalSample::normalized).collect())
    };
    let val = norm(Split::Val)?;
    let test = norm(Split::Test)?;
    Ok(Prepared { manifest, train, val, test })
}

pub fn format_loss_row(r: &StepRecord) -> String {
    let mut row = format!("{},{},{}", r.step, r.epoch, r.lr);
    for (_, v) in r.losses.components() {
        row.push(',');
        row.push_str(&v.to_string());
    }
    row
}

pub fn parse_loss_row(line: &str) -> Option<StepRecord> {
    let f: Vec<&str> = line.trim().split(',').collect();
    if f.len() != 14 {
        return None;
    }
    let v: Vec<f64> = f[2..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
    let losses = StepLosses {
        task: [v[1], v[2]],
        task_refine: [v[3], v[4]],
        pc: [v[5], v[6]],
        fc: v[7],
        refine: [v[8], v[9]],
        total: [v[10], v[11]],
    };
    Some(StepRecord { step: f[0].parse().ok()?, epoch: f[1].parse().ok()?, lr: v[0], losses })
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == LOSS_HEADER => {}
        _ => return Err(Error::format(path, "missing loss-log header")),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            parse_loss_row(&l).ok_or_else(|| Error::format(path, format!("bad row {}", i + 2)))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub checkpoint_every: usize,
    /// Continue from `out/checkpoint` when it exists.
    pub resume: bool,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Keeps the rows before `steps`, dropping anything an interrupted run wrote
/// after its last checkpoint.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let kept: Vec<StepRecord> = read_loss_log(path)?.into_iter().filter(|r| r.step < steps).collect();
    if kept.len() as u64 != steps {
        return Err(Error::format(path, format!("log has {} rows before step {steps}", kept.len())));
    }
    let mut text = String::from(LOSS_HEADER);
    text.push('\n');
    for r in &kept {
        text.push_str(&format_loss_row(r));
        text.push('\n');
    }
    crate::error::write(path, text)
}

/// Trains to `cfg.epochs`, writing the loss log and checkpoints under
/// `opts.out`.
pub fn train(cfg: &TrainConfig, data: &[TrainItem], opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.checkpoint_every == 0 {
        return Err(Error::config("run.checkpoint_every", "must be >= 1"));
    }
    create_dir(&opts.out)?;
    let ckpt = opts.out.join(CHECKPOINT_DIR);
    let log_path = opts.out.join(LOSS_LOG);
    let mut state = if opts.resume && ckpt.join("manifest.json").exists() {
        let (state, m) = load_checkpoint(&ckpt)?;
        if m.config != *cfg {
            return Err(Error::config("resume", "checkpoint was written with a different configuration"));
        }
        truncate_log(&log_path, state.step)?;
        log::info!("resuming at epoch {} (step {})", state.epoch, state.step);
        state
    } else {
        crate::error::write(&log_path, format!("{LOSS_HEADER}\n"))?;
        TrainState::init(cfg)?
    };
    let file = File::options().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while state.epoch < end {
        let records = run_epoch(&mut state, data, cfg)?;
        for r in &records {
            writeln!(log, "{}", format_loss_row(r)).map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        if let Some(last) = records.last() {
            log::info!("epoch {}/{} lr={:.3e} total1={:.4}", state.epoch, cfg.epochs, last.lr, last.losses.total[0]);
        }
        if state.epoch % opts.checkpoint_every == 0 || state.epoch == end {
            save_checkpoint(&ckpt, &state, cfg)?;
        }
    }
    Ok(TrainOutcome { state, checkpoint: ckpt, loss_log: log_path })
}

/// Loads a checkpoint and evaluates every modality subset on the test split.
pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<EvalReport> {
    let (branches, m) = load_branches(checkpoint)?;
    let prepared = prepare_eval(data, &m.config)?;
    Ok(evaluate_all_subsets(&prepared, &branches)?)
}

fn prepare_eval(data: &Path, cfg: &TrainConfig) -> Result<Vec<MultiModalSample>> {
    let manifest = read_manifest(data)?;
    if manifest.modalities != cfg.arch.modalities {
        return Err(Error::config("checkpoint", "modality count differs from the dataset"));
    }
    Ok(load_split(data, &manifest, Split::Test)?.iter().map(MultiModalSample::normalized).collect())
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
}

/// Trains and evaluates each variant with the same seed, data and schedule.
pub fn ablate(base: &TrainConfig, prepared: &Prepared, variants: &[Variant], out: &Path, every: usize) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = v.configure(base);
            let opts = TrainOptions { out: out.join(v.name()), checkpoint_every: every, resume: false, stop_after: None };
            log::info!("ablation: training {}", v.name());
            let outcome = train(&cfg, &prepared.train, &opts)?;
            let report = evaluate_all_subsets(&prepared.test, &outcome.state.branches)?;
            Ok(AblationRow { variant: v, report })
        })
        .collect()
}
