//! Cached per-modality prior volumes.
//!
//! `<root>/priors/<id>/prior_<k>.raw` holds `[C, H, W, Z]` little-endian f32
//! scores, with a `meta.json` beside them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smml_core::phantom::{default_visibility, MultiModalSample};
use smml_core::srn::{PriorProvider, SyntheticOracle};
use smml_core::Tensor;

use crate::dataset::{load_split, DatasetManifest, Split};
use crate::error::{create_dir, read, read_json, write, write_json, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub subject_id: String,
    #[serde(rename = "K")]
    pub modalities: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dims: [usize; 3],
    pub source: String,
    pub noise_rate: f64,
    pub seed: u64,
    pub dtype: String,
}

pub fn prior_root(data: &Path) -> PathBuf {
    data.join("priors")
}

pub fn has_priors(data: &Path) -> bool {
    prior_root(data).is_dir()
}

/// The synthetic oracle matching a dataset's generator, if it has one.
pub fn oracle_for(manifest: &DatasetManifest, noise_rate: f64, seed: u64) -> SyntheticOracle {
    let visibility = match &manifest.phantom {
        Some(p) => p.visibility.clone(),
        None => default_visibility(),
    };
    SyntheticOracle { noise_rate, visibility, seed }
}

/// Default oracle seed: the generator seed, so priors belong to the dataset.
pub fn default_prior_seed(manifest: &DatasetManifest) -> u64 {
    manifest.phantom.as_ref().map_or(0, |p| p.seed)
}

/// Writes oracle priors for every subject in the dataset.
pub fn build_priors(data: &Path, manifest: &DatasetManifest, noise_rate: f64, seed: u64) -> Result<usize> {
    let oracle = oracle_for(manifest, noise_rate, seed);
    let mut count = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        for sample in load_split(data, manifest, split)? {
            let dir = prior_root(data).join(&sample.subject_id);
            create_dir(&dir)?;
            for k in 0..sample.modalities() {
                let p = oracle.prior(&sample, k)?;
                let bytes: Vec<u8> = p.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                write(&dir.join(format!("prior_{k}.raw")), bytes)?;
            }
            let meta = PriorMeta {
                subject_id: sample.subject_id.clone(),
                modalities: sample.modalities(),
                classes: manifest.classes,
                dims: sample.dims().as_array(),
                source: "synthetic_oracle".into(),
                noise_rate,
                seed,
                dtype: "float32-le".into(),
            };
            write_json(&dir.join("meta.json"), &meta)?;
            count += 1;
        }
    }
    Ok(count)
}

/// Reads `prior_<k>.raw` of `subject`, expecting `classes` channels over
/// `dims`. Scores outside `[0, 1]` are clamped with a warning.
pub fn file_prior(data: &Path, subject: &str, k: usize, classes: usize, dims: [usize; 3]) -> Result<Tensor> {
    let path = prior_root(data).join(subject).join(format!("prior_{k}.raw"));
    let bytes = read(&path)?;
    let voxels: usize = dims.iter().product();
    if bytes.len() % 4 != 0 || bytes.len() / 4 != classes * voxels {
        let found = bytes.len() as f64 / (4 * voxels) as f64;
        return Err(Error::Core(smml_core::Error::Shape(format!(
            "{}: expected {classes} channels over {dims:?}, payload holds {found} channels",
            path.display()
        ))));
    }
    let mut clamped = 0usize;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            let r = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            clamped += (r != v) as usize;
            r
        })
        .collect();
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} scores into [0, 1]", path.display());
    }
    Ok(Tensor::from_vec(&[classes, dims[0], dims[1], dims[2]], data)?)
}

/// [`PriorProvider`] backed by the on-disk cache.
#[derive(Debug, Clone)]
pub struct FilePriors {
    pub data: PathBuf,
    pub classes: usize,
}

impl PriorProvider for FilePriors {
    fn prior(&self, sample: &MultiModalSample, k: usize) -> smml_core::Result<Tensor> {
        file_prior(&self.data, &sample.subject_id, k, self.classes, sample.dims().as_array()).map_err(|e| match e {
            Error::Core(c) => c,
            other => smml_core::Error::Validation(other.to_string()),
        })
    }
}

pub fn read_prior_meta(data: &Path, subject: &str) -> Result<PriorMeta> {
    read_json(&prior_root(data).join(subject).join("meta.json"))
}
