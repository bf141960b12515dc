//! Semantic priors and the refinement pathway.
//!
//! A [`PriorProvider`] yields one class-score volume per modality. Priors of
//! absent modalities are zeroed, stacked in front of the branch's initial
//! logits and passed through the refinement UNet. The initial prediction is
//! then pulled towards the refined one.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::backbone::{refine_forward, BranchNet};
use crate::error::{Error, Result};
use crate::masking::ModalityMask;
use crate::phantom::MultiModalSample;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{log_softmax_channels, LabelVolume, Tensor};

/// Per-modality class-score volumes, `[K, C, H, W, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorStack(pub Tensor);

impl PriorStack {
    pub fn from_modalities(per_modality: &[Tensor]) -> Result<Self> {
        for t in per_modality {
            t.dims3()?;
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation("prior scores must lie in [0, 1]".into()));
            }
        }
        Ok(PriorStack(Tensor::stack(per_modality)?))
    }

    pub fn modalities(&self) -> usize {
        self.0.channels()
    }

    pub fn modality(&self, k: usize) -> Tensor {
        self.0.slice0(k)
    }
}

/// Source of per-modality class-score volumes.
pub trait PriorProvider {
    /// `[C, H, W, Z]` scores for modality `k` of `sample`.
    fn prior(&self, sample: &MultiModalSample, k: usize) -> Result<Tensor>;

    fn priors(&self, sample: &MultiModalSample) -> Result<PriorStack> {
        let per = (0..sample.modalities()).map(|k| self.prior(sample, k)).collect::<Result<Vec<_>>>()?;
        PriorStack::from_modalities(&per)
    }
}

/// One-hot ground truth where each voxel is resampled uniformly with
/// probability `noise_rate · (1 − visibility[label])`.
pub fn synthetic_oracle_prior<R: RngCore + ?Sized>(
    labels: &LabelVolume,
    classes: usize,
    noise_rate: f64,
    visibility: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::config("noise_rate", format!("must lie in [0,1], got {noise_rate}")));
    }
    if visibility.len() != classes {
        return Err(Error::config("visibility", format!("row needs {classes} entries")));
    }
    labels.validate(classes)?;
    let n = labels.dims.voxels();
    let [h, w, z] = labels.dims.as_array();
    let mut out = Tensor::zeros(&[classes, h, w, z]);
    for (v, &l) in labels.data.iter().enumerate() {
        let p = noise_rate * (1.0 - visibility[l as usize]);
        let c = if rng.random::<f64>() < p { rng.random_range(0..classes) } else { l as usize };
        out.data_mut()[c * n + v] = 1.0;
    }
    Ok(out)
}

/// Deterministic stand-in for a zero-shot segmenter.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOracle {
    pub noise_rate: f64,
    /// `[K][C]`, usually the phantom's visibility matrix.
    pub visibility: Vec<Vec<f64>>,
    pub seed: u64,
}

/// FNV-1a; keys the prior stream by subject so caching order is irrelevant.
pub fn subject_key(subject_id: &str, k: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in subject_id.bytes().chain((k as u64).to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl PriorProvider for SyntheticOracle {
    fn prior(&self, sample: &MultiModalSample, k: usize) -> Result<Tensor> {
        let row = self.visibility.get(k).ok_or_else(|| Error::config("visibility", format!("no row for modality {k}")))?;
        let mut rng = stream_rng(self.seed, Stream::Priors, subject_key(&sample.subject_id, k));
        synthetic_oracle_prior(&sample.labels, row.len(), self.noise_rate, row, &mut rng)
    }
}

pub fn mask_priors(priors: &PriorStack, mask: &ModalityMask) -> Result<PriorStack> {
    Ok(PriorStack(crate::masking::apply_mask(&priors.0, mask)?))
}

/// `[prior_0 classes.., …, prior_{K−1} classes.., logits]` along channels.
pub fn refine_input(priors: &PriorStack, logits: &Tensor) -> Result<Tensor> {
    let dims = logits.dims3()?;
    let c = logits.channels();
    let ps = priors.0.shape();
    if ps.len() != 5 || ps[1] != c || ps[2..] != [dims.0, dims.1, dims.2] {
        return Err(Error::shape(format!("priors {:?} vs logits {:?}", ps, logits.shape())));
    }
    let k = ps[0];
    let mut data = Vec::with_capacity((k + 1) * logits.len());
    data.extend_from_slice(priors.0.data());
    data.extend_from_slice(logits.data());
    Tensor::from_vec(&[(k + 1) * c, dims.0, dims.1, dims.2], data)
}

/// Refined logits for already-masked priors.
pub fn refine(net: &BranchNet, logits: &Tensor, priors: &PriorStack) -> Result<Tensor> {
    refine_forward(net, &refine_input(priors, logits)?)
}

/// `KL(softmax(initial) ‖ softmax(refined))`, averaged over every voxel of
/// the batch, and its gradient with respect to `initial`. The refined side
/// receives no gradient.
pub fn refine_consistency_loss(initial: &[Tensor], refined: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    if initial.len() != refined.len() {
        return Err(Error::shape("batch sizes differ"));
    }
    let voxels: usize = initial.iter().map(Tensor::inner_len).sum();
    if voxels == 0 {
        return Ok((0.0, initial.iter().map(|t| Tensor::zeros(t.shape())).collect()));
    }
    let scale = 1.0 / voxels as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(initial.len());
    for (a, b) in initial.iter().zip(refined) {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("initial {:?} vs refined {:?}", a.shape(), b.shape())));
        }
        let c = a.channels();
        let n = a.inner_len();
        let la = log_softmax_channels(a, 1.0);
        let lb = log_softmax_channels(b, 1.0);
        let mut g = Tensor::zeros(a.shape());
        for v in 0..n {
            let kl: f64 = (0..c)
                .map(|k| {
                    let i = k * n + v;
                    libm::exp(la.data()[i]) * (la.data()[i] - lb.data()[i])
                })
                .sum();
            total += kl;
            for k in 0..c {
                let i = k * n + v;
                g.data_mut()[i] = scale * libm::exp(la.data()[i]) * (la.data()[i] - lb.data()[i] - kl);
            }
        }
        grads.push(g);
    }
    Ok((total * scale, grads))
}
