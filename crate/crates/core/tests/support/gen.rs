//! Random instances for the oracle and gradient checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smml_core::{Dims3, LabelVolume, Tensor};

pub const CLASSES: usize = 4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dims(rng: &mut impl Rng, max: usize) -> Dims3 {
    Dims3(rng.random_range(1..=max), rng.random_range(1..=max), rng.random_range(1..=max))
}

pub fn tensor(rng: &mut impl Rng, channels: usize, d: Dims3, scale: f64) -> Tensor {
    let n = channels * d.voxels();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(&[channels, d.0, d.1, d.2], data).unwrap()
}

pub fn labels(rng: &mut impl Rng, d: Dims3, classes: usize) -> LabelVolume {
    LabelVolume::new(d, (0..d.voxels()).map(|_| rng.random_range(0..classes as u8)).collect()).unwrap()
}

/// A batch of both branches' logits and fused features on one grid.
#[derive(Debug, Clone)]
pub struct Instance {
    pub dims: Dims3,
    pub d_f: usize,
    pub logits1: Vec<Tensor>,
    pub logits2: Vec<Tensor>,
    pub fused1: Vec<Tensor>,
    pub fused2: Vec<Tensor>,
    pub labels: Vec<LabelVolume>,
}

/// `B ≤ 3`, `C = 4`, grid up to `4³`, `d_f ≤ 8`.
pub fn instance(rng: &mut impl Rng) -> Instance {
    let b = rng.random_range(1..=3);
    let d = dims(rng, 4);
    let d_f = rng.random_range(1..=8);
    let draw = |ch: usize, scale: f64, rng: &mut ChaCha8Rng| (0..b).map(|_| tensor(rng, ch, d, scale)).collect::<Vec<_>>();
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    Instance {
        dims: d,
        d_f,
        logits1: draw(CLASSES, 3.0, &mut r),
        logits2: draw(CLASSES, 3.0, &mut r),
        fused1: draw(d_f, 1.0, &mut r),
        fused2: draw(d_f, 1.0, &mut r),
        labels: (0..b).map(|_| labels(&mut r, d, CLASSES)).collect(),
    }
}
