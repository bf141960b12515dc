//! Synthetic multi-modal phantoms with nested tumour sub-regions.
//!
//! Each subject carries three concentric, randomly rotated ellipsoids. The
//! outer shell is edema, the middle shell necrosis and the innermost core
//! enhancing tumour, so enhancing ⊆ core ⊆ whole tumour holds by
//! construction. Every modality renders each class at its own contrast
//! (`visibility[k][c]`) plus Gaussian noise.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Dims3, LabelVolume, Tensor};

pub const BACKGROUND: u8 = 0;
pub const NECROSIS: u8 = 1;
pub const EDEMA: u8 = 2;
pub const ENHANCING: u8 = 3;

/// Band on the non-background voxel fraction enforced by rejection.
pub const TUMOR_FRACTION_BAND: (f64, f64) = (0.02, 0.30);

const MAX_REJECTIONS: usize = 10_000;

/// Human-readable names of the four default modalities, in order.
pub const MODALITY_NAMES: [&str; 4] = ["flair", "t1ce", "t1", "t2"];

/// One subject: `K` aligned modality volumes and the label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub subject_id: String,
    /// `[K, H, W, Z]`.
    pub volumes: Tensor,
    pub labels: LabelVolume,
}

impl MultiModalSample {
    pub fn new(subject_id: String, volumes: Tensor, labels: LabelVolume) -> Result<Self> {
        let dims = volumes.dims3()?;
        if dims != labels.dims {
            return Err(Error::shape(format!(
                "volumes {:?} vs labels {:?}",
                volumes.shape(),
                labels.dims.as_array()
            )));
        }
        if !volumes.is_finite() {
            return Err(Error::Validation(format!("{subject_id}: non-finite intensity")));
        }
        Ok(MultiModalSample { subject_id, volumes, labels })
    }

    pub fn modalities(&self) -> usize {
        self.volumes.channels()
    }

    pub fn dims(&self) -> Dims3 {
        self.labels.dims
    }

    /// Copy with every modality shifted/scaled to zero mean, unit variance.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        zscore_normalize(&mut out.volumes);
        out
    }
}

/// Per-channel z-score; constant channels are only centred.
pub fn zscore_normalize(volumes: &mut Tensor) {
    for k in 0..volumes.channels() {
        let ch = volumes.channel_mut(k);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = libm::sqrt(var);
        let inv = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        for v in ch.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PhantomConfig {
    pub modalities: usize,
    pub classes: usize,
    pub grid: Dims3,
    pub num_subjects: usize,
    pub noise_std: f64,
    /// `[K][C]` contrast of class `c` in modality `k`, each in `[0, 1]`.
    pub visibility: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            modalities: 4,
            classes: 4,
            grid: Dims3::cube(16),
            num_subjects: 40,
            noise_std: 0.1,
            visibility: default_visibility(),
            seed: 7,
        }
    }
}

/// Rows: flair, t1ce, t1, t2. Columns: background, necrosis, edema,
/// enhancing. Each row has one dominant class.
pub fn default_visibility() -> Vec<Vec<f64>> {
    vec![
        vec![0.05, 0.45, 1.0, 0.6],
        vec![0.05, 0.25, 0.35, 1.0],
        vec![0.05, 1.0, 0.3, 0.5],
        vec![0.05, 0.7, 0.95, 0.3],
    ]
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities < 2 {
            return Err(Error::config("modalities", format!("need >= 2, got {}", self.modalities)));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::config("classes", format!("need 2..=255, got {}", self.classes)));
        }
        let [h, w, z] = self.grid.as_array();
        if h < 8 || w < 8 || z < 8 {
            return Err(Error::config("grid", format!("every axis must be >= 8, got {:?}", [h, w, z])));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", format!("must be finite and >= 0, got {}", self.noise_std)));
        }
        if self.visibility.len() != self.modalities {
            return Err(Error::config(
                "visibility",
                format!("need {} rows, got {}", self.modalities, self.visibility.len()),
            ));
        }
        for (k, row) in self.visibility.iter().enumerate() {
            if row.len() != self.classes {
                return Err(Error::config("visibility", format!("row {k} needs {} entries", self.classes)));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config("visibility", format!("row {k} has entries outside [0,1]")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::config("visibility", format!("row {k} is all zero")));
            }
        }
        Ok(())
    }
}

/// Label for nesting level `j` (0 = outermost) given `classes`.
fn level_label(j: usize, classes: usize) -> u8 {
    if classes == 4 {
        [EDEMA, NECROSIS, ENHANCING][j]
    } else {
        (j + 1) as u8
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    /// Rows are the ellipsoid's principal directions.
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of `p` with axes scaled by `s`.
    fn radius2(&self, p: [f64; 3], s: f64) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|i| {
                let q = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
                let a = self.axes[i] * s;
                q * q / (a * a)
            })
            .sum()
    }
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = (libm::sin(a), libm::cos(a));
    let (sb, cb) = (libm::sin(b), libm::cos(b));
    let (sc, cc) = (libm::sin(c), libm::cos(c));
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

fn draw_labels<R: Rng>(rng: &mut R, grid: Dims3, classes: usize) -> Result<LabelVolume> {
    let [h, w, z] = grid.as_array();
    let levels = classes - 1;
    let min_dim = h.min(w).min(z) as f64;
    for _ in 0..MAX_REJECTIONS {
        let r_lo = 0.15 * min_dim;
        let r_hi = 0.35 * min_dim;
        let axes = [rng.random_range(r_lo..r_hi), rng.random_range(r_lo..r_hi), rng.random_range(r_lo..r_hi)];
        let margin = 0.2 * min_dim;
        let center = [
            rng.random_range(margin..h as f64 - 1.0 - margin),
            rng.random_range(margin..w as f64 - 1.0 - margin),
            rng.random_range(margin..z as f64 - 1.0 - margin),
        ];
        let tau = core::f64::consts::TAU;
        let rot = rotation(rng.random_range(0.0..tau), rng.random_range(0.0..tau), rng.random_range(0.0..tau));
        let e = Ellipsoid { center, axes, rot };
        // scale of each nested level relative to the outer shell
        let mut scales = vec![1.0];
        for _ in 1..levels {
            let prev = *scales.last().unwrap();
            scales.push(prev * rng.random_range(0.6..0.8));
        }
        let mut data = vec![BACKGROUND; grid.voxels()];
        for i in 0..h {
            for j in 0..w {
                for k in 0..z {
                    let r2 = e.radius2([i as f64, j as f64, k as f64], 1.0);
                    let mut label = BACKGROUND;
                    for (lvl, &s) in scales.iter().enumerate() {
                        if r2 <= s * s {
                            label = level_label(lvl, classes);
                        }
                    }
                    data[grid.index(i, j, k)] = label;
                }
            }
        }
        let vol = LabelVolume::new(grid, data)?;
        let fg = vol.data.iter().filter(|&&l| l != BACKGROUND).count() as f64 / grid.voxels() as f64;
        let every_level = (0..levels).all(|lvl| vol.count(level_label(lvl, classes)) > 0);
        if every_level && (TUMOR_FRACTION_BAND.0..=TUMOR_FRACTION_BAND.1).contains(&fg) {
            return Ok(vol);
        }
    }
    Err(Error::config("grid", "could not place a tumour inside the voxel-fraction band"))
}

/// Generates `num_subjects` phantoms; a pure function of `config`.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Vec<MultiModalSample>> {
    config.validate()?;
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config("noise_std", format!("{e}")))?;
    let [h, w, z] = config.grid.as_array();
    let n = config.grid.voxels();
    (0..config.num_subjects)
        .map(|s| {
            let mut rng = stream_rng(config.seed, Stream::Phantom, s as u64);
            let labels = draw_labels(&mut rng, config.grid, config.classes)?;
            let mut volumes = Tensor::zeros(&[config.modalities, h, w, z]);
            for k in 0..config.modalities {
                let row = &config.visibility[k];
                let ch = volumes.channel_mut(k);
                for v in 0..n {
                    let mean = row[labels.data[v] as usize];
                    let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    // Representable in f32, the on-disk intensity type.
                    ch[v] = (mean + eps) as f32 as f64;
                }
            }
            MultiModalSample::new(format!("subject_{s:04}"), volumes, labels)
        })
        .collect()
}

/// Partition sizes: floor of each share, remainder handed out by largest
/// fractional part (earlier split wins ties).
fn split_sizes(n: usize, fractions: &[f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::config("fractions", "every split fraction must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("fractions", format!("must sum to 1, got {total}")));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // guard against 0.8*10 = 7.999...
    let mut sizes: [usize; 3] = [0; 3];
    for i in 0..3 {
        sizes[i] = libm::floor(exact[i] + 1e-9) as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::config("num_subjects", format!("{n} samples leave a split empty ({sizes:?})")));
    }
    Ok(sizes)
}

/// Shuffled index partition into (train, val, test).
pub fn split_indices(n: usize, fractions: &[f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let sizes = split_sizes(n, fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok([idx, val, test])
}

pub fn split_dataset<T>(samples: Vec<T>, fractions: &[f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [tr, va, te] = split_indices(samples.len(), fractions, seed)?;
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("disjoint split")).collect::<Vec<T>>();
    let train = take(&tr);
    let val = take(&va);
    let test = take(&te);
    Ok((train, val, test))
}

/// Mirrors a `[C, H, W, Z]` tensor along the flagged axes.
pub fn flip_tensor(t: &Tensor, axes: [bool; 3]) -> Tensor {
    if !axes.iter().any(|&a| a) {
        return t.clone();
    }
    let d = t.dims3().expect("flip needs [C,H,W,Z]");
    let mut out = Tensor::zeros(t.shape());
    for c in 0..t.channels() {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        flip_into(src, dst, d, axes);
    }
    out
}

pub fn flip_labels(l: &LabelVolume, axes: [bool; 3]) -> LabelVolume {
    let mut out = l.clone();
    flip_into(&l.data, &mut out.data, l.dims, axes);
    out
}

fn flip_into<T: Copy>(src: &[T], dst: &mut [T], d: Dims3, axes: [bool; 3]) {
    let [h, w, z] = d.as_array();
    for i in 0..h {
        let si = if axes[0] { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if axes[1] { w - 1 - j } else { j };
            for k in 0..z {
                let sk = if axes[2] { z - 1 - k } else { k };
                dst[d.index(i, j, k)] = src[d.index(si, sj, sk)];
            }
        }
    }
}
