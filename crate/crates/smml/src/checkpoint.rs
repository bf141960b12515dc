//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json            architecture, seed, epoch, step, config
//! <dir>/branch<i>.safetensors    named parameters of branch i
//! <dir>/adam<i>.safetensors      "m.<name>" / "v.<name>" moments of branch i
//! ```
//!
//! Tensors are stored as little-endian f64 so that resuming is exact.

use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use smml_core::backbone::{ArchConfig, BranchNet, ParamStore};
use smml_core::objective::{AdamState, TrainConfig, TrainState};
use smml_core::rng::{stream_rng, Stream};
use smml_core::Tensor;

use crate::error::{create_dir, read, read_json, write, write_json, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const TENSOR_DTYPE: &str = "float64-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub branches: usize,
    pub adam_steps: Vec<u64>,
    pub dtype: String,
    pub config: TrainConfig,
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_archive(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> =
        tensors.iter().map(|(n, t)| (n.clone(), to_bytes(t), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (n.as_str(), v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let blob = safetensors::tensor::serialize(views, &None).map_err(|e| Error::format(path, e.to_string()))?;
    write(path, blob)
}

fn read_archive(path: &Path, names: &[String], like: &[Tensor]) -> Result<Vec<Tensor>> {
    let blob = read(path)?;
    let st = SafeTensors::deserialize(&blob).map_err(|e| Error::format(path, e.to_string()))?;
    names
        .iter()
        .zip(like)
        .map(|(name, reference)| {
            let view = st.tensor(name).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
            if view.dtype() != Dtype::F64 {
                return Err(Error::format(path, format!("{name}: expected F64, found {:?}", view.dtype())));
            }
            if view.shape() != reference.shape() {
                return Err(Error::format(
                    path,
                    format!("{name}: shape {:?}, architecture needs {:?}", view.shape(), reference.shape()),
                ));
            }
            let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_vec(reference.shape(), data)?)
        })
        .collect()
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    create_dir(dir)?;
    for (i, (b, adam)) in state.branches.iter().zip(&state.adam).enumerate() {
        let names = &b.params.names;
        let params: Vec<(String, &Tensor)> = names.iter().cloned().zip(&b.params.values).collect();
        write_archive(&dir.join(format!("branch{i}.safetensors")), &params)?;
        let mut moments: Vec<(String, &Tensor)> = names.iter().map(|n| format!("m.{n}")).zip(&adam.m).collect();
        moments.extend(names.iter().map(|n| format!("v.{n}")).zip(&adam.v));
        write_archive(&dir.join(format!("adam{i}.safetensors")), &moments)?;
    }
    // Manifest last: its presence marks a complete checkpoint.
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        arch: cfg.arch.clone(),
        seed: cfg.seed,
        epoch: state.epoch,
        step: state.step,
        branches: state.branches.len(),
        adam_steps: state.adam.iter().map(|a| a.t).collect(),
        dtype: TENSOR_DTYPE.into(),
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let m: CheckpointManifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION || m.dtype != TENSOR_DTYPE {
        return Err(Error::format(&path, format!("unsupported checkpoint format {} / {}", m.format_version, m.dtype)));
    }
    if m.adam_steps.len() != m.branches || m.branches == 0 {
        return Err(Error::format(&path, "branch count disagrees with optimizer state"));
    }
    Ok(m)
}

fn template(arch: &ArchConfig) -> Result<BranchNet> {
    // Values are overwritten; only the wiring matters.
    Ok(BranchNet::new(arch, &mut stream_rng(0, Stream::InitBranch1, 0))?)
}

pub fn load_branches(dir: &Path) -> Result<(Vec<BranchNet>, CheckpointManifest)> {
    let m = read_checkpoint_manifest(dir)?;
    let tpl = template(&m.arch)?;
    let branches = (0..m.branches)
        .map(|i| {
            let values = read_archive(&dir.join(format!("branch{i}.safetensors")), &tpl.params.names, &tpl.params.values)?;
            Ok(tpl.with_params(ParamStore { names: tpl.params.names.clone(), values })?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((branches, m))
}

/// Full training state for resuming.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let (branches, m) = load_branches(dir)?;
    let mut adam = Vec::with_capacity(m.branches);
    for (i, b) in branches.iter().enumerate() {
        let names = &b.params.names;
        let keys: Vec<String> =
            names.iter().map(|n| format!("m.{n}")).chain(names.iter().map(|n| format!("v.{n}"))).collect();
        let like: Vec<Tensor> = b.params.values.iter().chain(&b.params.values).cloned().collect();
        let mut moments = read_archive(&dir.join(format!("adam{i}.safetensors")), &keys, &like)?;
        let v = moments.split_off(names.len());
        adam.push(AdamState { m: moments, v, t: m.adam_steps[i] });
    }
    let state = TrainState { branches, adam, epoch: m.epoch, step: m.step };
    Ok((state, m))
}
