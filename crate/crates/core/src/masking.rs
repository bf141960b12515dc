//! Modality-dropout masks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Presence vector over modalities; `true` means the modality is available.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModalityMask {
    bits: Vec<bool>,
}

impl ModalityMask {
    pub fn new(bits: Vec<bool>) -> Self {
        ModalityMask { bits }
    }

    pub fn full(k: usize) -> Self {
        ModalityMask { bits: alloc::vec![true; k] }
    }

    /// Bit `k` of `code` is modality `k`.
    pub fn from_code(code: u32, k: usize) -> Self {
        ModalityMask { bits: (0..k).map(|i| code >> i & 1 == 1).collect() }
    }

    pub fn code(&self) -> u32 {
        self.bits.iter().enumerate().map(|(i, &b)| (b as u32) << i).sum()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn count_present(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.count_present() == 0 {
            return Err(Error::Validation("modality mask has no present modality".into()));
        }
        Ok(())
    }

    /// `●` for present, `○` for absent, in modality order.
    pub fn render(&self) -> String {
        self.bits.iter().map(|&b| if b { '●' } else { '○' }).collect()
    }

    /// Inverse of [`ModalityMask::render`]; also accepts `1`/`0`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '●' | '1' => Ok(true),
                '○' | '0' => Ok(false),
                other => Err(Error::Validation(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModalityMask { bits })
    }
}

/// Strategy for drawing training masks.
pub trait MaskPolicy {
    fn sample(&self, rng: &mut dyn RngCore, k: usize) -> Result<ModalityMask>;
}

/// Uniform over the `2^K − 1` nonempty subsets.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformNonEmpty;

impl MaskPolicy for UniformNonEmpty {
    fn sample(&self, rng: &mut dyn RngCore, k: usize) -> Result<ModalityMask> {
        sample_mask(rng, k)
    }
}

fn check_k(k: usize) -> Result<()> {
    if !(2..=31).contains(&k) {
        return Err(Error::config("K", format!("need 2 <= K <= 31, got {k}")));
    }
    Ok(())
}

/// Draws a mask uniformly over the nonempty subsets of `0..k`.
pub fn sample_mask<R: RngCore + ?Sized>(rng: &mut R, k: usize) -> Result<ModalityMask> {
    check_k(k)?;
    let code = rng.random_range(1..(1u32 << k));
    Ok(ModalityMask::from_code(code, k))
}

/// Zeroes the leading-axis slices of `features` whose modality is absent.
pub fn apply_mask(features: &Tensor, mask: &ModalityMask) -> Result<Tensor> {
    if features.channels() != mask.len() || features.shape().is_empty() {
        return Err(Error::shape(format!(
            "mask has {} entries, features lead with {:?}",
            mask.len(),
            features.shape()
        )));
    }
    let mut out = features.clone();
    for k in 0..mask.len() {
        if !mask.is_present(k) {
            out.channel_mut(k).fill(0.0);
        }
    }
    Ok(out)
}

/// All nonempty subsets, ordered by popcount then by code.
pub fn enumerate_subsets(k: usize) -> Result<Vec<ModalityMask>> {
    check_k(k)?;
    let mut codes: Vec<u32> = (1..(1u32 << k)).collect();
    codes.sort_by_key(|c| (c.count_ones(), *c));
    Ok(codes.into_iter().map(|c| ModalityMask::from_code(c, k)).collect())
}
