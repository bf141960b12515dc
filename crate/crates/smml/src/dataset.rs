//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/subjects/<id>/meta.json
//! <root>/subjects/<id>/modality_<k>.raw   little-endian f32, [H, W, Z] row-major
//! <root>/subjects/<id>/label.raw          u8, [H, W, Z] row-major
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smml_core::phantom::{generate_phantom, split_indices, MultiModalSample, PhantomConfig, MODALITY_NAMES};
use smml_core::{Dims3, LabelVolume, Tensor};

use crate::error::{create_dir, read, read_json, write, write_json, Error, Result};

pub const VOLUME_DTYPE: &str = "float32-le";
pub const LABEL_DTYPE: &str = "uint8";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtypeTags {
    pub volumes: String,
    pub labels: String,
}

impl Default for DtypeTags {
    fn default() -> Self {
        DtypeTags { volumes: VOLUME_DTYPE.into(), labels: LABEL_DTYPE.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub subject_id: String,
    #[serde(rename = "K")]
    pub modalities: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dims: [usize; 3],
    pub modality_order: Vec<String>,
    pub dtype: DtypeTags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub dir: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "K")]
    pub modalities: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub dims: [usize; 3],
    pub modality_order: Vec<String>,
    /// Generator settings, when the data is synthetic.
    #[serde(default)]
    pub phantom: Option<PhantomConfig>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }
}

pub fn modality_names(k: usize) -> Vec<String> {
    if k == MODALITY_NAMES.len() {
        MODALITY_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|i| format!("m{i}")).collect()
    }
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Writes one subject directory. Volumes are stored as f32.
pub fn save_sample(sample: &MultiModalSample, classes: usize, dir: &Path) -> Result<()> {
    sample.labels.validate(classes)?;
    create_dir(dir)?;
    let k = sample.modalities();
    for i in 0..k {
        write(&dir.join(format!("modality_{i}.raw")), f32_bytes(sample.volumes.channel(i)))?;
    }
    write(&dir.join("label.raw"), &sample.labels.data)?;
    let meta = SampleMeta {
        subject_id: sample.subject_id.clone(),
        modalities: k,
        classes,
        dims: sample.dims().as_array(),
        modality_order: modality_names(k),
        dtype: DtypeTags::default(),
    };
    write_json(&dir.join("meta.json"), &meta)
}

/// Reads a subject directory written by [`save_sample`], without
/// normalisation.
pub fn load_sample(dir: &Path) -> Result<MultiModalSample> {
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = read_json(&meta_path)?;
    if meta.dtype != DtypeTags::default() {
        return Err(Error::format(&meta_path, format!("unsupported dtype tags {:?}", meta.dtype)));
    }
    if meta.modality_order.len() != meta.modalities {
        return Err(Error::format(&meta_path, "modality_order length differs from K"));
    }
    let [h, w, z] = meta.dims;
    let dims = Dims3(h, w, z);
    let n = dims.voxels();
    let mut data = Vec::with_capacity(meta.modalities * n);
    for i in 0..meta.modalities {
        let path = dir.join(format!("modality_{i}.raw"));
        let bytes = read(&path)?;
        if bytes.len() != 4 * n {
            return Err(Error::format(&path, format!("expected {n} f32 values for {:?}, found {} bytes", meta.dims, bytes.len())));
        }
        data.extend(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))));
    }
    let label_path = dir.join("label.raw");
    let labels = read(&label_path)?;
    if labels.len() != n {
        return Err(Error::format(&label_path, format!("expected {n} labels for {:?}, found {}", meta.dims, labels.len())));
    }
    let labels = LabelVolume::new(dims, labels)?;
    labels.validate(meta.classes)?;
    let volumes = Tensor::from_vec(&[meta.modalities, h, w, z], data)?;
    Ok(MultiModalSample::new(meta.subject_id, volumes, labels)?)
}

pub fn subject_dir(root: &Path, entry: &SubjectEntry) -> PathBuf {
    root.join(&entry.dir)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join(MANIFEST))
}

/// Generates phantoms, splits them and writes the dataset under `root`.
pub fn generate_dataset(root: &Path, phantom: &PhantomConfig, fractions: &[f64; 3], split_seed: u64) -> Result<DatasetManifest> {
    let samples = generate_phantom(phantom)?;
    let [train, val, test] = split_indices(samples.len(), fractions, split_seed)?;
    let mut split = vec![Split::Train; samples.len()];
    for &i in &val {
        split[i] = Split::Val;
    }
    for &i in &test {
        split[i] = Split::Test;
    }
    debug_assert_eq!(train.len() + val.len() + test.len(), samples.len());
    let mut subjects = Vec::with_capacity(samples.len());
    for (s, sp) in samples.iter().zip(split) {
        let entry = SubjectEntry { id: s.subject_id.clone(), dir: format!("subjects/{}", s.subject_id), split: sp };
        save_sample(s, phantom.classes, &subject_dir(root, &entry))?;
        subjects.push(entry);
    }
    let manifest = DatasetManifest {
        modalities: phantom.modalities,
        classes: phantom.classes,
        dims: phantom.grid.as_array(),
        modality_order: modality_names(phantom.modalities),
        phantom: Some(phantom.clone()),
        subjects,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads every subject of `split`, in manifest order, checking each against
/// the manifest's shape.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<MultiModalSample>> {
    manifest
        .ids(split)
        .map(|e| {
            let dir = subject_dir(root, e);
            let s = load_sample(&dir)?;
            if s.modalities() != manifest.modalities || s.dims().as_array() != manifest.dims {
                return Err(Error::format(&dir, "subject shape differs from the dataset manifest"));
            }
            if s.subject_id != e.id {
                return Err(Error::format(&dir, format!("holds subject {}, manifest says {}", s.subject_id, e.id)));
            }
            Ok(s)
        })
        .collect()
}
