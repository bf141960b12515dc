//! Task losses, per-branch objectives, Adam with a poly schedule, and the
//! masked dual-branch training step.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{NodeId, Tape};
use crate::backbone::{ArchConfig, BranchNet};
use crate::error::{Error, Result};
use crate::hcc::{self, PbcOptions};
use crate::masking::{sample_mask, ModalityMask};
use crate::phantom::{flip_labels, flip_tensor, MultiModalSample};
use crate::rng::{stream_rng, Stream};
use crate::srn::{mask_priors, PriorStack};
use crate::tensor::{softmax_channels, LabelVolume, Tensor};

/// Smoothing term of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub tau: f64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub lambda_pc: f64,
    pub lambda_fc: f64,
    pub lambda_refine: f64,
    pub lambda_task_refine: f64,
    /// Scale the pixel-consistency terms by `τ²`.
    pub tau_squared: bool,
    /// Global-norm clip per branch; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// `false` trains a single branch with task loss only.
    pub dual_branch: bool,
    /// Random axis flips with probability 0.5 per axis.
    pub flips: bool,
    pub seed: u64,
    pub prior_noise_rate: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 6.0,
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 2,
            poly_power: 0.9,
            lambda_pc: 1.0,
            lambda_fc: 1.0,
            lambda_refine: 1.0,
            lambda_task_refine: 1.0,
            tau_squared: false,
            grad_clip: Some(5.0),
            dual_branch: true,
            flips: true,
            seed: 0,
            prior_noise_rate: 0.3,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be > 0, got {v}")))
            }
        };
        pos("tau", self.tau)?;
        pos("lr0", self.lr0)?;
        pos("poly_power", self.poly_power)?;
        pos("adam_eps", self.adam_eps)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta", "Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        for (name, v) in [
            ("lambda_pc", self.lambda_pc),
            ("lambda_fc", self.lambda_fc),
            ("lambda_refine", self.lambda_refine),
            ("lambda_task_refine", self.lambda_task_refine),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.prior_noise_rate) {
            return Err(Error::config("prior_noise_rate", "must lie in [0, 1]"));
        }
        if let Some(c) = self.grad_clip {
            pos("grad_clip", c)?;
        }
        self.arch.validate()
    }

    /// Whether the refinement networks run at all.
    pub fn uses_refinement(&self) -> bool {
        self.lambda_refine > 0.0 || self.lambda_task_refine > 0.0
    }

    pub fn branches(&self) -> usize {
        if self.dual_branch {
            2
        } else {
            1
        }
    }
}

/// Per-step loss components; index 0 is branch 1.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub task: [f64; 2],
    pub task_refine: [f64; 2],
    pub pc: [f64; 2],
    pub fc: f64,
    pub refine: [f64; 2],
    pub total: [f64; 2],
}

impl StepLosses {
    /// `(name, value)` for every component, in log-column order.
    pub fn components(&self) -> [(&'static str, f64); 11] {
        [
            ("task1", self.task[0]),
            ("task2", self.task[1]),
            ("task_refine1", self.task_refine[0]),
            ("task_refine2", self.task_refine[1]),
            ("pc1", self.pc[0]),
            ("pc2", self.pc[1]),
            ("fc", self.fc),
            ("refine1", self.refine[0]),
            ("refine2", self.refine[1]),
            ("total1", self.total[0]),
            ("total2", self.total[1]),
        ]
    }
}

fn check_batch(logits: &[Tensor], labels: &[LabelVolume]) -> Result<usize> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape("logits and labels batch sizes differ"));
    }
    let c = logits[0].channels();
    for (l, y) in logits.iter().zip(labels) {
        if l.dims3()? != y.dims || l.channels() != c {
            return Err(Error::shape(format!("logits {:?} vs labels {:?}", l.shape(), y.dims.as_array())));
        }
        y.validate(c)?;
    }
    Ok(c)
}

/// Voxel-mean cross entropy over the batch and its logit gradient.
pub fn cross_entropy(logits: &[Tensor], labels: &[LabelVolume]) -> Result<(f64, Vec<Tensor>)> {
    check_batch(logits, labels)?;
    let voxels: usize = labels.iter().map(|l| l.dims.voxels()).sum();
    let scale = 1.0 / voxels as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, y) in logits.iter().zip(labels) {
        total += hcc::pixel_ce_map(l, y)?.values.iter().sum::<f64>();
        let mut g = softmax_channels(l, 1.0);
        let n = y.dims.voxels();
        for (v, &c) in y.data.iter().enumerate() {
            g.data_mut()[c as usize * n + v] -= 1.0;
        }
        g.scale(scale);
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// Soft multi-class Dice loss, pooled over the batch, averaged uniformly
/// over all classes including background.
pub fn dice_loss(logits: &[Tensor], labels: &[LabelVolume]) -> Result<(f64, Vec<Tensor>)> {
    let classes = check_batch(logits, labels)?;
    let probs: Vec<Tensor> = logits.iter().map(|l| softmax_channels(l, 1.0)).collect();
    let mut inter = vec![0.0; classes];
    let mut pred = vec![0.0; classes];
    let mut truth = vec![0.0; classes];
    for (p, y) in probs.iter().zip(labels) {
        let n = y.dims.voxels();
        for c in 0..classes {
            pred[c] += p.channel(c).iter().sum::<f64>();
        }
        for (v, &c) in y.data.iter().enumerate() {
            inter[c as usize] += p.data()[c as usize * n + v];
            truth[c as usize] += 1.0;
        }
    }
    let mut score = 0.0;
    let mut coef = vec![0.0; classes];
    let mut offset = vec![0.0; classes];
    for c in 0..classes {
        let den = pred[c] + truth[c] + DICE_EPS;
        let num = 2.0 * inter[c] + DICE_EPS;
        score += num / den;
        // d(num/den)/dp_c(v) = (2 y den − num) / den²
        coef[c] = 2.0 / den;
        offset[c] = num / (den * den);
    }
    let loss = 1.0 - score / classes as f64;
    let k = -1.0 / classes as f64;
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let n = y.dims.voxels();
            let mut g = Tensor::zeros(p.shape());
            let mut dp = vec![0.0; classes];
            for v in 0..n {
                let label = y.data[v] as usize;
                for c in 0..classes {
                    let yc = if c == label { 1.0 } else { 0.0 };
                    dp[c] = k * (yc * coef[c] - offset[c]);
                }
                let dot: f64 = (0..classes).map(|c| p.data()[c * n + v] * dp[c]).sum();
                for c in 0..classes {
                    g.data_mut()[c * n + v] = p.data()[c * n + v] * (dp[c] - dot);
                }
            }
            g
        })
        .collect();
    Ok((loss, grads))
}

/// Cross entropy plus Dice.
pub fn task_loss(logits: &[Tensor], labels: &[LabelVolume]) -> Result<(f64, Vec<Tensor>)> {
    let (ce, mut g) = cross_entropy(logits, labels)?;
    let (dice, gd) = dice_loss(logits, labels)?;
    for (a, b) in g.iter_mut().zip(&gd) {
        a.add_assign(b);
    }
    Ok((ce + dice, g))
}

/// Raw component values of one step, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub task: [f64; 2],
    pub task_refine: [f64; 2],
    pub pc: [f64; 2],
    pub fc: f64,
    pub refine: [f64; 2],
}

/// `L_i = task_i + λ_tr·task_refine_i + λ_pc·pc_i + λ_fc·fc + λ_ref·refine_i`.
pub fn composite_losses(c: &LossComponents, cfg: &TrainConfig, step: u64) -> Result<StepLosses> {
    let named = [
        ("task1", c.task[0]),
        ("task2", c.task[1]),
        ("task_refine1", c.task_refine[0]),
        ("task_refine2", c.task_refine[1]),
        ("pc1", c.pc[0]),
        ("pc2", c.pc[1]),
        ("fc", c.fc),
        ("refine1", c.refine[0]),
        ("refine2", c.refine[1]),
    ];
    if let Some((term, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { term: term.to_string(), step });
    }
    let total = |i: usize| {
        c.task[i]
            + cfg.lambda_task_refine * c.task_refine[i]
            + cfg.lambda_pc * c.pc[i]
            + cfg.lambda_fc * c.fc
            + cfg.lambda_refine * c.refine[i]
    };
    Ok(StepLosses {
        task: c.task,
        task_refine: c.task_refine,
        pc: c.pc,
        fc: c.fc,
        refine: c.refine,
        total: [total(0), total(1)],
    })
}

/// `lr0 · (1 − epoch/epochs)^power`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::config("epoch", format!("{epoch} outside 0..{}", cfg.epochs)));
    }
    Ok(cfg.lr0 * libm::pow(1.0 - epoch as f64 / cfg.epochs as f64, cfg.poly_power))
}

/// Adam moments for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One Adam step with L2 weight decay folded into the gradient.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (libm::sqrt(vh) + cfg.adam_eps);
            }
        }
    }
}

/// One training example: normalized volumes and their cached priors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub sample: MultiModalSample,
    pub priors: PriorStack,
}

impl TrainItem {
    pub fn flipped(&self, axes: [bool; 3]) -> Result<TrainItem> {
        let s = &self.sample;
        let priors = {
            let k = self.priors.modalities();
            let per: Vec<Tensor> = (0..k).map(|i| flip_tensor(&self.priors.modality(i), axes)).collect();
            PriorStack(Tensor::stack(&per)?)
        };
        Ok(TrainItem {
            sample: MultiModalSample {
                subject_id: s.subject_id.clone(),
                volumes: flip_tensor(&s.volumes, axes),
                labels: flip_labels(&s.labels, axes),
            },
            priors,
        })
    }
}

/// Losses and raw (unclipped) parameter gradients of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub losses: StepLosses,
    /// One gradient list per active branch, aligned with its `ParamStore`.
    pub grads: Vec<Vec<Tensor>>,
}

fn push_seed(seeds: &mut Vec<(NodeId, Tensor)>, id: NodeId, mut g: Tensor, scale: f64) {
    if scale == 0.0 {
        return;
    }
    if scale != 1.0 {
        g.scale(scale);
    }
    seeds.push((id, g));
}

fn ensure_finite(t: &[Tensor], term: &str, step: u64) -> Result<()> {
    if t.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.into(), step })
    }
}

/// Forward pass of every active branch on the batch, all losses, and one
/// backward pass.
///
/// Gradients into a branch's parameters are exactly `∂L_i/∂θ_i`: teacher
/// sides of the pixel and refinement consistency terms are constants, and
/// the shared relational term reaches each branch only through its own
/// fused features.
pub fn compute_gradients(
    branches: &[BranchNet],
    batch: &[TrainItem],
    masks: &[ModalityMask],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepGradients> {
    let nb = cfg.branches();
    if branches.len() < nb || masks.len() < nb {
        return Err(Error::config("branches", format!("need {nb} branches and masks")));
    }
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let labels: Vec<LabelVolume> = batch.iter().map(|it| it.sample.labels.clone()).collect();
    let mut tape = Tape::new();
    let bound: Vec<_> = branches[..nb].iter().map(|b| b.bind(&mut tape)).collect();
    let mut logits_ids = vec![Vec::new(); nb];
    let mut fused_ids = vec![Vec::new(); nb];
    for i in 0..nb {
        masks[i].ensure_nonempty()?;
        for it in batch {
            let out = branches[i].forward(&mut tape, &bound[i], &it.sample.volumes, &masks[i])?;
            logits_ids[i].push(out.logits);
            fused_ids[i].push(out.fused);
        }
    }
    let values = |tape: &Tape, ids: &[NodeId]| ids.iter().map(|&id| tape.value(id).clone()).collect::<Vec<_>>();
    let logits: Vec<Vec<Tensor>> = (0..nb).map(|i| values(&tape, &logits_ids[i])).collect();

    let mut comp = LossComponents::default();
    let mut seeds = Vec::new();
    for i in 0..nb {
        let (l, g) = task_loss(&logits[i], &labels)?;
        ensure_finite(&g, if i == 0 { "task1 gradient" } else { "task2 gradient" }, step)?;
        comp.task[i] = l;
        for (&id, g) in logits_ids[i].iter().zip(g) {
            push_seed(&mut seeds, id, g, 1.0);
        }
    }

    if nb == 2 {
        let tmasks = logits[0]
            .iter()
            .zip(&logits[1])
            .zip(&labels)
            .map(|((a, b), y)| hcc::transfer_mask(&hcc::pixel_ce_map(a, y)?, &hcc::pixel_ce_map(b, y)?))
            .collect::<Result<Vec<_>>>()?;
        let opts = PbcOptions { tau: cfg.tau, tau_squared: cfg.tau_squared };
        let pbc = hcc::pbc_loss(&logits[0], &logits[1], &tmasks, opts)?;
        comp.pc = [pbc.l1, pbc.l2];
        for (i, grads) in [pbc.grad1, pbc.grad2].into_iter().enumerate() {
            for (&id, g) in logits_ids[i].iter().zip(grads) {
                push_seed(&mut seeds, id, g, cfg.lambda_pc);
            }
        }

        let fused: Vec<Vec<Tensor>> = (0..2).map(|i| values(&tape, &fused_ids[i])).collect();
        let fdims = fused[0][0].dims3()?;
        let labels_f = labels.iter().map(|l| hcc::downsample_labels(l, fdims)).collect::<Result<Vec<_>>>()?;
        let weights = hcc::class_uncertainty_weights(&logits[0], &logits[1])?;
        let frc = hcc::frc_forward_backward(&fused[0], &fused[1], &labels_f, &weights)?;
        comp.fc = frc.loss;
        for (i, grads) in [frc.grad1, frc.grad2].into_iter().enumerate() {
            ensure_finite(&grads, "fc gradient", step)?;
            for (&id, g) in fused_ids[i].iter().zip(grads) {
                push_seed(&mut seeds, id, g, cfg.lambda_fc);
            }
        }
    }

    if cfg.uses_refinement() {
        for i in 0..nb {
            let mut refined_ids = Vec::with_capacity(batch.len());
            for (b, it) in batch.iter().enumerate() {
                let masked = mask_priors(&it.priors, &masks[i])?;
                let [_, h, w, z] = <[usize; 4]>::try_from(logits[i][b].shape()).expect("4-d logits");
                let k = masked.modalities();
                let c = branches[i].arch.classes;
                let prior_node = tape.input(masked.0.reshape(&[k * c, h, w, z])?);
                let combined = tape.concat(&[prior_node, logits_ids[i][b]])?;
                refined_ids.push(branches[i].refine_node(&mut tape, &bound[i], combined)?);
            }
            let refined = values(&tape, &refined_ids);
            let (lt, gt) = task_loss(&refined, &labels)?;
            comp.task_refine[i] = lt;
            for (&id, g) in refined_ids.iter().zip(gt) {
                push_seed(&mut seeds, id, g, cfg.lambda_task_refine);
            }
            let (lr, gr) = crate::srn::refine_consistency_loss(&logits[i], &refined)?;
            comp.refine[i] = lr;
            for (&id, g) in logits_ids[i].iter().zip(gr) {
                push_seed(&mut seeds, id, g, cfg.lambda_refine);
            }
        }
    }

    let losses = composite_losses(&comp, cfg, step)?;
    let g = tape.backward(seeds)?;
    let grads = (0..nb)
        .map(|i| {
            bound[i]
                .ids()
                .iter()
                .zip(&branches[i].params.values)
                .map(|(&id, p)| g.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    for (i, gs) in grads.iter().enumerate() {
        ensure_finite(gs, if i == 0 { "branch1 gradient" } else { "branch2 gradient" }, step)?;
    }
    Ok(StepGradients { losses, grads })
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub branches: Vec<BranchNet>,
    pub adam: Vec<AdamState>,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    /// Fresh branches from the per-branch init streams.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let streams = [Stream::InitBranch1, Stream::InitBranch2];
        let branches = (0..cfg.branches())
            .map(|i| BranchNet::new(&cfg.arch, &mut stream_rng(cfg.seed, streams[i], 0)))
            .collect::<Result<Vec<_>>>()?;
        let adam = branches.iter().map(|b| AdamState::new(&b.params.values)).collect();
        Ok(TrainState { branches, adam, epoch: 0, step: 0 })
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

/// Computes gradients, clips them and applies one Adam update per branch.
pub fn train_step(
    state: &mut TrainState,
    batch: &[TrainItem],
    masks: &[ModalityMask],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let StepGradients { losses, mut grads } = compute_gradients(&state.branches, batch, masks, cfg, state.step)?;
    for (i, g) in grads.iter_mut().enumerate() {
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(g, c);
        }
        state.adam[i].update(&mut state.branches[i].params.values, g, lr, cfg);
        if !state.branches[i].params.is_finite() {
            return Err(Error::NonFinite { term: format!("branch{} parameters", i + 1), step: state.step });
        }
    }
    state.step += 1;
    Ok(losses)
}

/// Runs `state.epoch` over `data` and advances the epoch counter.
///
/// Sample order, masks and flips are drawn from per-epoch streams, so the
/// epoch is reproducible from `(cfg.seed, epoch)` alone.
pub fn run_epoch(state: &mut TrainState, data: &[TrainItem], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::config("train split", "no training samples"));
    }
    let epoch = state.epoch;
    let lr = poly_lr(epoch, cfg)?;
    let e = epoch as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, Stream::DataOrder, e));
    let mut mask_rngs = [stream_rng(cfg.seed, Stream::MasksBranch1, e), stream_rng(cfg.seed, Stream::MasksBranch2, e)];
    let mut flip_rng = stream_rng(cfg.seed, Stream::Flips, e);
    let k = cfg.arch.modalities;
    let mut records = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        let batch = chunk
            .iter()
            .map(|&i| {
                let axes = [flip_rng.random_bool(0.5), flip_rng.random_bool(0.5), flip_rng.random_bool(0.5)];
                if cfg.flips {
                    data[i].flipped(axes)
                } else {
                    Ok(data[i].clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = mask_rngs
            .iter_mut()
            .take(cfg.branches())
            .map(|r| sample_mask(r, k))
            .collect::<Result<Vec<_>>>()?;
        let step = state.step;
        let losses = train_step(state, &batch, &masks, lr, cfg)?;
        records.push(StepRecord { step, epoch, lr, losses });
    }
    state.epoch += 1;
    Ok(records)
}

/// Table-style ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    /// One branch, task loss only.
    Baseline,
    /// Two branches, task losses only, averaged at inference.
    DualBranch,
    DualPbc,
    DualFrc,
    DualSrn,
    /// Every component.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::DualBranch, Variant::DualPbc, Variant::DualFrc, Variant::DualSrn, Variant::Full];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DualBranch => "dual_branch",
            Variant::DualPbc => "dual_pbc",
            Variant::DualFrc => "dual_frc",
            Variant::DualSrn => "dual_srn",
            Variant::Full => "full",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline (single branch)",
            Variant::DualBranch => "Dual-branch",
            Variant::DualPbc => "Dual-branch + PBC",
            Variant::DualFrc => "Dual-branch + FRC",
            Variant::DualSrn => "Dual-branch + SRN",
            Variant::Full => "Full (PBC + FRC + SRN)",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// `base` with the paths of this variant switched on or off. Enabled
    /// components keep their coefficients from `base`.
    pub fn configure(&self, base: &TrainConfig) -> TrainConfig {
        let (dual, pbc, frc, srn) = match self {
            Variant::Baseline => (false, false, false, false),
            Variant::DualBranch => (true, false, false, false),
            Variant::DualPbc => (true, true, false, false),
            Variant::DualFrc => (true, false, true, false),
            Variant::DualSrn => (true, false, false, true),
            Variant::Full => (true, true, true, true),
        };
        let keep = |on: bool, v: f64| if on { v } else { 0.0 };
        TrainConfig {
            dual_branch: dual,
            lambda_pc: keep(pbc, base.lambda_pc),
            lambda_fc: keep(frc, base.lambda_fc),
            lambda_refine: keep(srn, base.lambda_refine),
            lambda_task_refine: keep(srn, base.lambda_task_refine),
            ..base.clone()
        }
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Human-readable summary used by the CLI log.
pub fn describe(losses: &StepLosses) -> String {
    let mut s = String::new();
    for (name, v) in losses.components() {
        s.push_str(&format!("{name}={v:.4} "));
    }
    s.trim_end().into()
}
