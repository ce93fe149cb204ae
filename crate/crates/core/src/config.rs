//! Run configuration files: the model and training settings plus the data
//! split, versioned, with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::model::HctConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Contiguous train/validation/test fractions; the test share is the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.7, val: 0.15 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train > 0.0 && self.val >= 0.0 && self.train + self.val <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid split {:?}", self)));
        }
        Ok(())
    }

    pub fn apply(&self, dataset: &Dataset) -> (Dataset, Dataset, Dataset) {
        dataset.split(self.train, self.val)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: HctConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitConfig,
    /// Dataset directory the run used; filled in by `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Primary modality fixed by hand; filled in by `train --pin-primary`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pin_primary: Option<Modality>,
}

impl RunConfig {
    pub fn new(model: HctConfig, train: TrainConfig) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model,
            train,
            split: SplitConfig::default(),
            data: None,
            pin_primary: None,
        }
    }

    /// Named defaults: `mosi`, `mosei` or `iemocap`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mosi" => Ok(Self::new(HctConfig::mosi(), TrainConfig::mosi())),
            "mosei" => Ok(Self::new(HctConfig::mosei(), TrainConfig::mosei())),
            "iemocap" => Ok(Self::new(HctConfig::iemocap(), TrainConfig::iemocap())),
            other => Err(Error::Config(format!("unknown preset {other:?} (mosi, mosei, iemocap)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: RunConfig = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Parse a JSON file; malformed or unknown content is a configuration error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
