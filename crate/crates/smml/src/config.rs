//! TOML run configuration.
//!
//! ```toml
//! [data]
//! fractions = [0.8, 0.1, 0.1]
//! split_seed = 0
//! [data.phantom]
//! num_subjects = 40
//! [train]
//! epochs = 200
//! lr0 = 1e-3
//! grad_clip = 1.0
//! [train.arch]
//! enc_channels = [4, 8, 8]
//! [run]
//! checkpoint_every = 10
//! variants = ["baseline", "full"]
//! ```
//!
//! Missing keys take the defaults of [`RunConfig::default`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use smml_core::objective::{TrainConfig, Variant};
use smml_core::phantom::PhantomConfig;

use crate::error::{read_string, Error, Result};

pub const SEED_ENV: &str = "SMML_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    pub fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { phantom: PhantomConfig::default(), fractions: [0.8, 0.1, 0.1], split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    /// Variants trained by `ablate`.
    pub variants: Vec<Variant>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { checkpoint_every: 10, variants: Variant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
}

impl Default for RunConfig {
    /// The 16³ phantom recipe. Differs from [`TrainConfig::default`] in two
    /// knobs: a larger initial learning rate for the short schedule, and a
    /// relational weight of one over the voxel count, since the relational
    /// loss sums uncertainty weights over every voxel.
    fn default() -> Self {
        let data = DataConfig::default();
        let voxels = data.phantom.grid.voxels() as f64;
        RunConfig {
            train: TrainConfig { lr0: 1e-3, lambda_fc: 1.0 / voxels, grad_clip: Some(1.0), ..TrainConfig::default() },
            data,
            run: RunOptions::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses `text` layered over [`RunConfig::default`]: keys present in the
    /// file replace defaults one by one, also inside nested tables.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::config("run config", e.to_string());
        let overlay: toml::Table = toml::from_str(text).map_err(|e: toml::de::Error| err(&e.message()))?;
        let mut base = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut base, overlay);
        toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| err(&e.message()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Reads `path` and applies the `SMML_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&read_string(path)?).map_err(|e| match e {
            Error::Core(smml_core::Error::Config { reason, .. }) => Error::format(path, reason),
            other => other,
        })?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed =
                v.trim().parse().map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        self.train.validate()?;
        let (p, a) = (&self.data.phantom, &self.train.arch);
        if p.modalities != a.modalities {
            return Err(Error::config("train.arch.modalities", format!("{} but the data has {}", a.modalities, p.modalities)));
        }
        if p.classes != a.classes {
            return Err(Error::config("train.arch.classes", format!("{} but the data has {}", a.classes, p.classes)));
        }
        if self.run.checkpoint_every == 0 {
            return Err(Error::config("run.checkpoint_every", "must be >= 1"));
        }
        if self.run.variants.is_empty() {
            return Err(Error::config("run.variants", "list at least one variant"));
        }
        Ok(())
    }
}
