use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Spatial extent `(H, W, Z)` of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims3(pub usize, pub usize, pub usize);

impl Dims3 {
    pub fn cube(n: usize) -> Self {
        Dims3(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.0 * self.1 * self.2
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.0, self.1, self.2]
    }

    /// Extent after `levels` stride-2 reductions; errors unless every axis
    /// divides evenly.
    pub fn reduced(&self, levels: u32) -> Result<Dims3> {
        let f = 1usize << levels;
        if self.0 % f != 0 || self.1 % f != 0 || self.2 % f != 0 || self.voxels() == 0 {
            return Err(Error::shape(format!(
                "grid {:?} not divisible by 2^{levels}",
                self.as_array()
            )));
        }
        Ok(Dims3(self.0 / f, self.1 / f, self.2 / f))
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, z: usize) -> usize {
        (h * self.1 + w) * self.2 + z
    }
}

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (channel) extent.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Spatial extent of a `[C, H, W, Z]` tensor.
    pub fn dims3(&self) -> Result<Dims3> {
        match self.shape[..] {
            [_, h, w, z] => Ok(Dims3(h, w, z)),
            _ => Err(Error::shape(format!("expected [C,H,W,Z], got {:?}", self.shape))),
        }
    }

    /// Product of all but the leading axis.
    pub fn inner_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.inner_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.inner_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(format!("stack {:?} vs {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Slice `i` along the leading axis as an owned tensor.
    pub fn slice0(&self, i: usize) -> Tensor {
        Tensor { shape: self.shape[1..].to_vec(), data: self.channel(i).to_vec() }
    }
}

/// Integer label volume with values in `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Dims3,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims3, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::shape(format!(
                "label grid {:?} needs {} voxels, got {}",
                dims.as_array(),
                dims.voxels(),
                data.len()
            )));
        }
        Ok(LabelVolume { dims, data })
    }

    pub fn filled(dims: Dims3, label: u8) -> Self {
        LabelVolume { dims, data: vec![label; dims.voxels()] }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Validation(format!("label {bad} outside 0..{classes}")));
        }
        Ok(())
    }

    /// One-hot `[C, H, W, Z]` encoding.
    pub fn one_hot(&self, classes: usize) -> Tensor {
        let n = self.dims.voxels();
        let [h, w, z] = self.dims.as_array();
        let mut t = Tensor::zeros(&[classes, h, w, z]);
        for (v, &l) in self.data.iter().enumerate() {
            t.data[l as usize * n + v] = 1.0;
        }
        t
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = libm::exp(*v - m);
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

/// Per-voxel softmax over the class axis of `[C, ...]` logits, optionally
/// dividing by a temperature first.
pub fn softmax_channels(logits: &Tensor, temperature: f64) -> Tensor {
    let c = logits.channels();
    let n = logits.inner_len();
    let mut out = Tensor::zeros(logits.shape());
    let mut buf = vec![0.0; c];
    for v in 0..n {
        for k in 0..c {
            buf[k] = logits.data[k * n + v] / temperature;
        }
        softmax_in_place(&mut buf);
        for k in 0..c {
            out.data[k * n + v] = buf[k];
        }
    }
    out
}

/// Per-voxel log-softmax over the class axis.
pub fn log_softmax_channels(logits: &Tensor, temperature: f64) -> Tensor {
    let c = logits.channels();
    let n = logits.inner_len();
    let mut out = Tensor::zeros(logits.shape());
    for v in 0..n {
        let m = (0..c).map(|k| logits.data[k * n + v] / temperature).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..c).map(|k| libm::exp(logits.data[k * n + v] / temperature - m)).sum();
        let lse = m + libm::log(s);
        for k in 0..c {
            out.data[k * n + v] = logits.data[k * n + v] / temperature - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_rejects_odd_grids() {
        assert_eq!(Dims3::cube(16).reduced(2).unwrap(), Dims3::cube(4));
        assert!(Dims3(16, 12, 10).reduced(2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0]).unwrap();
        let p = softmax_channels(&t, 1.0);
        for v in 0..2 {
            let s: f64 = (0..3).map(|k| p.data()[k * 2 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = log_softmax_channels(&t, 2.0);
        let p2 = softmax_channels(&t, 2.0);
        for (a, b) in lp.data().iter().zip(p2.data()) {
            assert!((libm::exp(*a) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_layout() {
        let l = LabelVolume::new(Dims3(1, 1, 2), vec![1, 0]).unwrap();
        let t = l.one_hot(2);
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(l.validate(2).is_ok());
        assert!(l.validate(1).is_err());
    }
}
