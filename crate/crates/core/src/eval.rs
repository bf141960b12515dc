//! Inference by branch averaging, region Dice and the all-subset report.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::BranchNet;
use crate::error::{Error, Result};
use crate::masking::{enumerate_subsets, ModalityMask};
use crate::phantom::{MultiModalSample, EDEMA, ENHANCING, NECROSIS};
use crate::tensor::{softmax_channels, LabelVolume, Tensor};

/// Nested evaluation regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    WholeTumor,
    TumorCore,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::Enhancing];

    pub fn name(&self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::Enhancing => "ET",
        }
    }

    pub fn classes(&self) -> &'static [u8] {
        match self {
            Region::WholeTumor => &[NECROSIS, EDEMA, ENHANCING],
            Region::TumorCore => &[NECROSIS, ENHANCING],
            Region::Enhancing => &[ENHANCING],
        }
    }

    pub fn contains(&self, label: u8) -> bool {
        self.classes().contains(&label)
    }
}

/// Mean of the branches' softmax outputs and its argmax (lowest index wins
/// ties).
pub fn predict(volumes: &Tensor, mask: &ModalityMask, branches: &[BranchNet]) -> Result<(Tensor, LabelVolume)> {
    mask.ensure_nonempty()?;
    if branches.is_empty() {
        return Err(Error::Validation("no branches to predict with".into()));
    }
    let mut probs: Option<Tensor> = None;
    for b in branches {
        let p = softmax_channels(&b.predict_logits(volumes, mask)?, 1.0);
        match &mut probs {
            Some(acc) => acc.add_assign(&p),
            None => probs = Some(p),
        }
    }
    let mut probs = probs.expect("at least one branch");
    probs.scale(1.0 / branches.len() as f64);
    let labels = argmax_labels(&probs)?;
    Ok((probs, labels))
}

pub fn argmax_labels(probs: &Tensor) -> Result<LabelVolume> {
    let dims = probs.dims3()?;
    let c = probs.channels();
    let n = dims.voxels();
    let data = (0..n)
        .map(|v| {
            let mut best = 0;
            for k in 1..c {
                if probs.data()[k * n + v] > probs.data()[best * n + v] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume::new(dims, data)
}

/// `2|P∩G| / (|P|+|G|)`; both empty counts as 1.
pub fn region_dsc(pred: &LabelVolume, truth: &LabelVolume, region: Region) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::shape("prediction and ground truth grids differ"));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (ia, ib) = (region.contains(a), region.contains(b));
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// DSC percentages per (modality subset × region).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub masks: Vec<ModalityMask>,
    /// `rows[i][r]` in `[0, 100]`, regions in [`Region::ALL`] order.
    pub rows: Vec<[f64; 3]>,
}

impl EvalReport {
    pub fn region_means(&self) -> [f64; 3] {
        let n = self.rows.len() as f64;
        let mut out = [0.0; 3];
        for row in &self.rows {
            for r in 0..3 {
                out[r] += row[r];
            }
        }
        out.map(|s| s / n)
    }

    pub fn grand_mean(&self) -> f64 {
        self.region_means().iter().sum::<f64>() / 3.0
    }

    /// Row of the full-modality subset, if present.
    pub fn full_row(&self) -> Option<[f64; 3]> {
        self.masks.iter().position(ModalityMask::is_full).map(|i| self.rows[i])
    }
}

/// Per-region DSC (fraction) of one subject under one mask.
pub fn subject_scores(sample: &MultiModalSample, mask: &ModalityMask, branches: &[BranchNet]) -> Result<[f64; 3]> {
    let (_, pred) = predict(&sample.volumes, mask, branches)?;
    let mut out = [0.0; 3];
    for (i, r) in Region::ALL.iter().enumerate() {
        out[i] = region_dsc(&pred, &sample.labels, *r)?;
    }
    Ok(out)
}

/// Subject-averaged DSC under the given masks.
pub fn evaluate_masks(samples: &[MultiModalSample], masks: &[ModalityMask], branches: &[BranchNet]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::config("test split", "no samples to evaluate"));
    }
    let mut rows = Vec::with_capacity(masks.len());
    for m in masks {
        let mut acc = [0.0; 3];
        for s in samples {
            let sc = subject_scores(s, m, branches)?;
            for r in 0..3 {
                acc[r] += sc[r];
            }
        }
        rows.push(acc.map(|v| 100.0 * v / samples.len() as f64));
    }
    Ok(EvalReport { masks: masks.to_vec(), rows })
}

/// Evaluation over every nonempty modality subset, in canonical order.
pub fn evaluate_all_subsets(samples: &[MultiModalSample], branches: &[BranchNet]) -> Result<EvalReport> {
    let k = branches.first().ok_or_else(|| Error::Validation("no branches".into()))?.arch.modalities;
    if let Some(s) = samples.iter().find(|s| s.modalities() != k) {
        return Err(Error::shape(format!("{} has {} modalities, model expects {k}", s.subject_id, s.modalities())));
    }
    evaluate_masks(samples, &enumerate_subsets(k)?, branches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims3;

    #[test]
    fn dsc_examples() {
        let d = Dims3(1, 1, 2);
        let g = LabelVolume::new(d, alloc::vec![3, 3]).unwrap();
        let p = LabelVolume::new(d, alloc::vec![3, 0]).unwrap();
        assert!((region_dsc(&p, &g, Region::Enhancing).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(region_dsc(&g, &g, Region::WholeTumor).unwrap(), 1.0);
        let bg = LabelVolume::filled(d, 0);
        assert_eq!(region_dsc(&bg, &bg, Region::Enhancing).unwrap(), 1.0);
        let e = LabelVolume::new(d, alloc::vec![2, 0]).unwrap();
        let f = LabelVolume::new(d, alloc::vec![0, 2]).unwrap();
        assert_eq!(region_dsc(&e, &f, Region::WholeTumor).unwrap(), 0.0);
    }

    #[test]
    fn region_nesting() {
        for c in Region::Enhancing.classes() {
            assert!(Region::TumorCore.contains(*c));
        }
        for c in Region::TumorCore.classes() {
            assert!(Region::WholeTumor.contains(*c));
        }
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let p = Tensor::from_vec(&[2, 1, 1, 2], alloc::vec![0.5, 0.3, 0.5, 0.7]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap().data, alloc::vec![0, 1]);
    }
}
