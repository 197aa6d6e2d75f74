//! The merged command-line configuration: a JSON file whose every field is
//! optional, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialogue::{read_corpus, SpeakerSet};
use crate::encoding::WindowConfig;
use crate::error::{Error, Result};
use crate::experiment::{Corpora, SyntheticConfig, Variant};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Where the dialogues come from. Without a training corpus the synthetic
/// task is generated instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Speaker tags; the first is speaker 0.
    pub speakers: [String; 2],
    pub window: WindowConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            valid: None,
            test: None,
            speakers: ["t".into(), "g".into()],
            window: WindowConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn speaker_set(&self) -> SpeakerSet {
        SpeakerSet::from_tags(&self.speakers[0], &self.speakers[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    /// Seeds initialisation, data order and dropout.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    /// Overrides the two speaker switches of `model` when set.
    pub variant: Option<Variant>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the variant and the shared seed.
    pub fn resolve(mut self) -> Self {
        if let Some(v) = self.variant {
            self.model = v.apply(&self.model);
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn uses_synthetic(&self) -> bool {
        self.data.train.is_none()
    }

    pub fn corpora(&self) -> Result<Corpora> {
        if self.uses_synthetic() {
            return Corpora::synthetic(&self.synthetic);
        }
        let speakers = self.data.speaker_set();
        let read = |p: &Option<PathBuf>| -> Result<Vec<_>> {
            p.as_ref().map_or_else(|| Ok(Vec::new()), |p| read_corpus(p, &speakers))
        };
        Ok(Corpora::new(
            speakers.clone(),
            read(&self.data.train)?,
            read(&self.data.valid)?,
            read(&self.data.test)?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.speakers[0] == self.data.speakers[1] {
            return Err(Error::Config("the two speaker tags must differ".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: CliConfig = serde_json::from_str(r#"{"train": {"total_steps": 20}, "variant": "+both"}"#).unwrap();
        assert_eq!(cfg.train.total_steps, 20);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.d_model, 64);
        let cfg = cfg.resolve();
        assert!(cfg.model.relative_speaker_attention);
    }

    #[test]
    fn missing_file_names_path() {
        let err = CliConfig::load(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.json"));
    }
}
