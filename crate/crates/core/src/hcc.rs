//! Hierarchical consistency between the two branches.
//!
//! Pixel level: per-voxel cross entropy decides which branch teaches the
//! other at each voxel, and the receiving branch is pulled towards the
//! teacher's tempered distribution. Feature level: class prototypes of the
//! fused features give a cosine relation matrix per branch, and the
//! uncertainty-weighted squared difference of the two matrices is
//! penalised.
//!
//! Batched functions take one tensor per sample. Every loss returns its
//! analytic gradient alongside the value; teacher sides and class weights
//! are constants.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_channels, softmax_channels, Dims3, LabelVolume, Tensor};

/// Guard inside the logarithm of the entropy weights.
pub const ENTROPY_EPS: f64 = 1e-12;

/// Per-voxel cross entropy `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossMap {
    pub dims: Dims3,
    pub values: Vec<f64>,
}

/// `true` where branch 2 teaches branch 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferMask {
    pub dims: Dims3,
    pub bits: Vec<bool>,
}

impl TransferMask {
    /// Voxels where knowledge flows from branch 2 to branch 1.
    pub fn n21(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Voxels where knowledge flows from branch 1 to branch 2.
    pub fn n12(&self) -> usize {
        self.bits.len() - self.n21()
    }
}

fn check_logits(logits: &Tensor, labels: &LabelVolume) -> Result<usize> {
    let dims = logits.dims3()?;
    if dims != labels.dims {
        return Err(Error::shape(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.dims.as_array()
        )));
    }
    let c = logits.channels();
    labels.validate(c)?;
    Ok(c)
}

pub fn pixel_ce_map(logits: &Tensor, labels: &LabelVolume) -> Result<PixelLossMap> {
    check_logits(logits, labels)?;
    let lp = log_softmax_channels(logits, 1.0);
    let n = labels.dims.voxels();
    let values = labels.data.iter().enumerate().map(|(v, &l)| -lp.data()[l as usize * n + v]).collect();
    Ok(PixelLossMap { dims: labels.dims, values })
}

/// `T_M(p) = 1` iff `Q1(p) > Q2(p)`.
pub fn transfer_mask(q1: &PixelLossMap, q2: &PixelLossMap) -> Result<TransferMask> {
    if q1.dims != q2.dims {
        return Err(Error::shape(format!("Q maps {:?} vs {:?}", q1.dims.as_array(), q2.dims.as_array())));
    }
    Ok(TransferMask { dims: q1.dims, bits: q1.values.iter().zip(&q2.values).map(|(a, b)| a > b).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbcOptions {
    pub tau: f64,
    /// Multiply both terms by `τ²`. Off unless asked for.
    pub tau_squared: bool,
}

impl PbcOptions {
    pub fn new(tau: f64) -> Self {
        PbcOptions { tau, tau_squared: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbcOutput {
    pub l1: f64,
    pub l2: f64,
    /// `∂L1pc/∂logits1`, one tensor per sample.
    pub grad1: Vec<Tensor>,
    /// `∂L2pc/∂logits2`, one tensor per sample.
    pub grad2: Vec<Tensor>,
}

/// Adds `KL(softmax(s/τ) ‖ softmax(t/τ))` at every selected voxel to the
/// running sum, with the student-side gradient scaled by `scale`.
fn masked_kl(
    student: &Tensor,
    teacher: &Tensor,
    select: impl Fn(usize) -> bool,
    tau: f64,
    scale: f64,
    grad: &mut Tensor,
) -> f64 {
    let c = student.channels();
    let n = student.inner_len();
    let ls = log_softmax_channels(student, tau);
    let lt = log_softmax_channels(teacher, tau);
    let mut total = 0.0;
    for v in 0..n {
        if !select(v) {
            continue;
        }
        let mut kl = 0.0;
        for k in 0..c {
            let i = k * n + v;
            kl += libm::exp(ls.data()[i]) * (ls.data()[i] - lt.data()[i]);
        }
        total += kl;
        for k in 0..c {
            let i = k * n + v;
            let p = libm::exp(ls.data()[i]);
            grad.data_mut()[i] = scale * p * (ls.data()[i] - lt.data()[i] - kl) / tau;
        }
    }
    total
}

/// Bidirectional pixel-level consistency, pooled over the batch: `N21` and
/// `N12` count voxels across every sample. An empty side contributes 0.
pub fn pbc_loss(logits1: &[Tensor], logits2: &[Tensor], tmask: &[TransferMask], opts: PbcOptions) -> Result<PbcOutput> {
    if !(opts.tau > 0.0) {
        return Err(Error::config("tau", format!("must be > 0, got {}", opts.tau)));
    }
    if logits1.len() != logits2.len() || logits1.len() != tmask.len() {
        return Err(Error::shape("batch sizes of logits and transfer masks differ"));
    }
    for ((a, b), m) in logits1.iter().zip(logits2).zip(tmask) {
        if a.shape() != b.shape() || a.dims3()? != m.dims {
            return Err(Error::shape(format!("pbc inputs {:?} / {:?} / {:?}", a.shape(), b.shape(), m.dims.as_array())));
        }
    }
    let n21: usize = tmask.iter().map(TransferMask::n21).sum();
    let n12: usize = tmask.iter().map(TransferMask::n12).sum();
    let t2 = if opts.tau_squared { opts.tau * opts.tau } else { 1.0 };
    let mut out = PbcOutput {
        l1: 0.0,
        l2: 0.0,
        grad1: logits1.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        grad2: logits2.iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    for b in 0..logits1.len() {
        let m = &tmask[b];
        if n21 > 0 {
            let s = t2 / n21 as f64;
            out.l1 += s * masked_kl(&logits1[b], &logits2[b], |v| m.bits[v], opts.tau, s, &mut out.grad1[b]);
        }
        if n12 > 0 {
            let s = t2 / n12 as f64;
            out.l2 += s * masked_kl(&logits2[b], &logits1[b], |v| !m.bits[v], opts.tau, s, &mut out.grad2[b]);
        }
    }
    Ok(out)
}

/// Nearest-corner subsampling of labels onto a coarser grid.
pub fn downsample_labels(labels: &LabelVolume, target: Dims3) -> Result<LabelVolume> {
    let [h, w, z] = labels.dims.as_array();
    let [th, tw, tz] = target.as_array();
    if th == 0 || tw == 0 || tz == 0 || h % th != 0 || w % tw != 0 || z % tz != 0 {
        return Err(Error::shape(format!("cannot subsample {:?} onto {:?}", [h, w, z], [th, tw, tz])));
    }
    let (sh, sw, sz) = (h / th, w / tw, z / tz);
    let mut data = vec![0u8; target.voxels()];
    for i in 0..th {
        for j in 0..tw {
            for k in 0..tz {
                data[target.index(i, j, k)] = labels.data[labels.dims.index(i * sh, j * sw, k * sz)];
            }
        }
    }
    LabelVolume::new(target, data)
}

/// Class-mean feature vectors, `[B, C, d]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub batch: usize,
    pub classes: usize,
    pub dim: usize,
    pub prototypes: Vec<f64>,
    pub valid: Vec<bool>,
    pub counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn get(&self, b: usize, c: usize) -> &[f64] {
        let i = (b * self.classes + c) * self.dim;
        &self.prototypes[i..i + self.dim]
    }

    pub fn is_valid(&self, b: usize, c: usize) -> bool {
        self.valid[b * self.classes + c]
    }
}

pub fn class_prototypes(fused: &[Tensor], labels_f: &[LabelVolume], classes: usize) -> Result<PrototypeSet> {
    if fused.len() != labels_f.len() || fused.is_empty() {
        return Err(Error::shape("prototype batch mismatch"));
    }
    let dim = fused[0].channels();
    let batch = fused.len();
    let mut set = PrototypeSet {
        batch,
        classes,
        dim,
        prototypes: vec![0.0; batch * classes * dim],
        valid: vec![false; batch * classes],
        counts: vec![0; batch * classes],
    };
    for (b, (f, l)) in fused.iter().zip(labels_f).enumerate() {
        if f.dims3()? != l.dims || f.channels() != dim {
            return Err(Error::shape(format!("features {:?} vs labels {:?}", f.shape(), l.dims.as_array())));
        }
        l.validate(classes)?;
        let n = l.dims.voxels();
        for (v, &c) in l.data.iter().enumerate() {
            let slot = b * classes + c as usize;
            set.counts[slot] += 1;
            for d in 0..dim {
                set.prototypes[slot * dim + d] += f.data()[d * n + v];
            }
        }
        for c in 0..classes {
            let slot = b * classes + c;
            if set.counts[slot] > 0 {
                set.valid[slot] = true;
                let inv = 1.0 / set.counts[slot] as f64;
                set.prototypes[slot * dim..(slot + 1) * dim].iter_mut().for_each(|x| *x *= inv);
            }
        }
    }
    Ok(set)
}

/// Square `[B·C, B·C]` cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub size: usize,
    pub data: Vec<f64>,
}

impl RelationMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }
}

fn norms(p: &PrototypeSet) -> Vec<f64> {
    (0..p.batch * p.classes)
        .map(|a| libm::sqrt(p.prototypes[a * p.dim..(a + 1) * p.dim].iter().map(|x| x * x).sum()))
        .collect()
}

pub fn relation_matrix(p: &PrototypeSet) -> RelationMatrix {
    let n = p.batch * p.classes;
    let norm = norms(p);
    for a in 0..n {
        if p.valid[a] && norm[a] == 0.0 {
            log::warn!("prototype (b={}, c={}) has zero norm; its similarities are set to 0", a / p.classes, a % p.classes);
        }
    }
    let usable = |a: usize| p.valid[a] && norm[a] > 0.0;
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        if !usable(a) {
            continue;
        }
        let pa = &p.prototypes[a * p.dim..(a + 1) * p.dim];
        for b in a..n {
            if !usable(b) {
                continue;
            }
            let r = if a == b {
                1.0
            } else {
                let pb = &p.prototypes[b * p.dim..(b + 1) * p.dim];
                let dot: f64 = pa.iter().zip(pb).map(|(x, y)| x * y).sum();
                (dot / (norm[a] * norm[b])).clamp(-1.0, 1.0)
            };
            data[a * n + b] = r;
            data[b * n + a] = r;
        }
    }
    RelationMatrix { size: n, data }
}

/// Row-wise squared difference of two relation matrices restricted to
/// valid endpoints; `valid` is `[B·C]`.
pub fn relational_distance(r1: &RelationMatrix, r2: &RelationMatrix, valid: &[bool]) -> Result<Vec<f64>> {
    if r1.size != r2.size || valid.len() != r1.size {
        return Err(Error::shape(format!("relation sizes {} / {} / {}", r1.size, r2.size, valid.len())));
    }
    let n = r1.size;
    Ok((0..n)
        .map(|a| {
            if !valid[a] {
                return 0.0;
            }
            (0..n)
                .filter(|&b| valid[b])
                .map(|b| {
                    let d = r1.at(a, b) - r2.at(a, b);
                    d * d
                })
                .sum()
        })
        .collect())
}

/// Per-sample, per-class entropy mass, `[B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub batch: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

/// `Σ_voxels −ŷ log ŷ` per class for each sample of one branch.
pub fn branch_uncertainty(logits: &[Tensor]) -> Result<ClassWeights> {
    let classes = logits.first().ok_or_else(|| Error::shape("empty batch"))?.channels();
    let mut data = Vec::with_capacity(logits.len() * classes);
    for l in logits {
        if l.channels() != classes {
            return Err(Error::shape("class count differs within batch"));
        }
        let p = softmax_channels(l, 1.0);
        for c in 0..classes {
            data.push(p.channel(c).iter().map(|&y| -y * libm::log(y + ENTROPY_EPS)).sum());
        }
    }
    Ok(ClassWeights { batch: logits.len(), classes, data })
}

/// Mean of both branches' entropy weights.
pub fn class_uncertainty_weights(logits1: &[Tensor], logits2: &[Tensor]) -> Result<ClassWeights> {
    let w1 = branch_uncertainty(logits1)?;
    let w2 = branch_uncertainty(logits2)?;
    if w1.batch != w2.batch || w1.classes != w2.classes {
        return Err(Error::shape("branch logits disagree in batch or class count"));
    }
    Ok(mean_weights(&w1, &w2))
}

pub fn mean_weights(w1: &ClassWeights, w2: &ClassWeights) -> ClassWeights {
    ClassWeights {
        batch: w1.batch,
        classes: w1.classes,
        data: w1.data.iter().zip(&w2.data).map(|(a, b)| (a + b) / 2.0).collect(),
    }
}

pub fn frc_loss(d_r: &[f64], w: &ClassWeights) -> Result<f64> {
    if d_r.len() != w.data.len() {
        return Err(Error::shape(format!("D_r has {} entries, weights {}", d_r.len(), w.data.len())));
    }
    Ok(d_r.iter().zip(&w.data).map(|(d, w)| d * w).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrcOutput {
    pub loss: f64,
    pub distance: Vec<f64>,
    /// `∂L_fc/∂F_1`, one tensor per sample.
    pub grad1: Vec<Tensor>,
    /// `∂L_fc/∂F_2`, one tensor per sample.
    pub grad2: Vec<Tensor>,
}

/// Full relational constraint with gradients into both branches' fused
/// features. `labels_f` must already be at feature resolution.
pub fn frc_forward_backward(
    fused1: &[Tensor],
    fused2: &[Tensor],
    labels_f: &[LabelVolume],
    weights: &ClassWeights,
) -> Result<FrcOutput> {
    let classes = weights.classes;
    let p1 = class_prototypes(fused1, labels_f, classes)?;
    let p2 = class_prototypes(fused2, labels_f, classes)?;
    if weights.batch != p1.batch {
        return Err(Error::shape("weights batch differs from feature batch"));
    }
    let r1 = relation_matrix(&p1);
    let r2 = relation_matrix(&p2);
    let distance = relational_distance(&r1, &r2, &p1.valid)?;
    let loss = frc_loss(&distance, weights)?;

    let n = r1.size;
    // dL/dR1 = G, dL/dR2 = -G
    let mut g = vec![0.0; n * n];
    for a in 0..n {
        if !p1.valid[a] {
            continue;
        }
        for b in 0..n {
            if p1.valid[b] {
                g[a * n + b] = 2.0 * weights.data[a] * (r1.at(a, b) - r2.at(a, b));
            }
        }
    }
    let grad1 = feature_grads(fused1, labels_f, &p1, &r1, &g, 1.0);
    let grad2 = feature_grads(fused2, labels_f, &p2, &r2, &g, -1.0);
    Ok(FrcOutput { loss, distance, grad1, grad2 })
}

fn feature_grads(
    fused: &[Tensor],
    labels_f: &[LabelVolume],
    p: &PrototypeSet,
    r: &RelationMatrix,
    g: &[f64],
    sign: f64,
) -> Vec<Tensor> {
    let n = r.size;
    let dim = p.dim;
    let norm = norms(p);
    let usable = |a: usize| p.valid[a] && norm[a] > 0.0;
    let mut dproto = vec![0.0; n * dim];
    for a in 0..n {
        if !usable(a) {
            continue;
        }
        let ua: Vec<f64> = p.prototypes[a * dim..(a + 1) * dim].iter().map(|x| x / norm[a]).collect();
        for b in 0..n {
            if b == a || !usable(b) {
                continue;
            }
            let coef = sign * (g[a * n + b] + g[b * n + a]) / norm[a];
            if coef == 0.0 {
                continue;
            }
            let rab = r.at(a, b);
            for d in 0..dim {
                let ub = p.prototypes[b * dim + d] / norm[b];
                dproto[a * dim + d] += coef * (ub - rab * ua[d]);
            }
        }
    }
    fused
        .iter()
        .zip(labels_f)
        .enumerate()
        .map(|(b, (f, l))| {
            let mut out = Tensor::zeros(f.shape());
            let nv = l.dims.voxels();
            for (v, &c) in l.data.iter().enumerate() {
                let slot = b * p.classes + c as usize;
                let inv = 1.0 / p.counts[slot] as f64;
                for d in 0..dim {
                    out.data_mut()[d * nv + v] = dproto[slot * dim + d] * inv;
                }
            }
            out
        })
        .collect()
}
