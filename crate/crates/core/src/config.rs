//! The run configuration document: `{data, model, train, eval}`, every key
//! optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{validate_ratios, Split};
use crate::model::EWasteNetConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train / validation / test fractions.
    pub ratios: [f64; 3],
    /// Optional background-removal program, run as `program <in> <out>`.
    pub background_hook: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            background_hook: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: EWasteNetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = validate_ratios(self.data.ratios) {
            problems.push(format!("data: {e}"));
        }
        for r in [self.model.validate(), self.train.validate()] {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        }
        if self.eval.batch_size == 0 {
            problems.push("eval: batch_size must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}
