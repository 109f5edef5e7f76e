//! The single JSON run configuration and its command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use concepthash::centers::CenterMode;
use concepthash::model::ModelConfig;
use concepthash::objective::LossConfig;
use concepthash::synth::SyntheticSpec;
use concepthash::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training set directory; the synthetic generator is used when absent.
    pub train_data: Option<PathBuf>,
    /// Query/test set directory; the synthetic test split when absent.
    pub query_data: Option<PathBuf>,
    /// Class-name embedding file, required for language centers.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: None,
            query_data: None,
            embeddings: None,
            checkpoint: PathBuf::from("concepthash.ckpt"),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Everything a run depends on. `seed` drives model init, shuffling,
/// augmentation, and synthetic data; it replaces `train.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub synthetic: SyntheticSpec,
    pub paths: Paths,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale run on the synthetic glyph set.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file. Relative input paths (datasets, embeddings) are
    /// taken relative to the file; output paths stay relative to the
    /// working directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for input in [
            &mut cfg.paths.train_data,
            &mut cfg.paths.query_data,
            &mut cfg.paths.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if input.is_relative() {
                *input = base.join(&*input);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `dotted.key=value` override. The value is read as JSON
    /// when it parses, otherwise as a string; the key must already exist.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// The training config with the run seed applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn uses_synthetic(&self) -> bool {
        self.paths.train_data.is_none() || self.paths.query_data.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.model.center_mode == CenterMode::Language && self.paths.embeddings.is_none() {
            return Err(CliError::Config(
                "paths.embeddings: language centers need a class-name embedding file".into(),
            ));
        }
        if self.uses_synthetic() {
            self.synthetic.validate()?;
            let enc = &self.model.encoder;
            if self.synthetic.num_classes != self.model.num_classes {
                return Err(CliError::Config(format!(
                    "synthetic.num_classes: {} differs from model.num_classes = {}",
                    self.synthetic.num_classes, self.model.num_classes
                )));
            }
            if self.synthetic.image_size != enc.image_size || enc.channels != 1 {
                return Err(CliError::Config(format!(
                    "synthetic.image_size: {}px grayscale images do not fit a {}px, {}-channel encoder",
                    self.synthetic.image_size, enc.image_size, enc.channels
                )));
            }
        }
        Ok(())
    }
}

/// Command-line flags layered over the config file, in this order:
/// `--set` assignments, then `--seed`, then the loss and center flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sets: Vec<String>,
    pub no_quan: bool,
    pub no_csd: bool,
    pub no_cd: bool,
    pub center_mode: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for s in &self.sets {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.no_quan {
            cfg.loss.enable_quan = false;
        }
        if self.no_csd {
            cfg.loss.enable_csd = false;
        }
        if self.no_cd {
            cfg.loss.enable_cd = false;
        }
        if let Some(mode) = &self.center_mode {
            cfg.model.center_mode = mode.parse()?;
        }
        Ok(())
    }
}

/// Loads `path` (or the desk preset when absent), applies the overrides,
/// and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}
