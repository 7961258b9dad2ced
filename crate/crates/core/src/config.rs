//! JSON run configuration: one file addressing every training, generation
//! and evaluation field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::train::TrainConfig;

/// Top-level configuration document with `train`, `gen` and `eval`
/// sections; omitted fields take their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub gen: GenSpec,
    pub eval: EvalConfig,
}

impl FileConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config: FileConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            detail: format!("invalid config: {e}"),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.gen.validate()?;
        self.eval.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_fills_defaults() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), r#"{"train": {"t": 5, "hidden": 32}}"#).unwrap();
        let config = FileConfig::load(f.path()).unwrap();
        assert_eq!(config.train.t, 5);
        assert_eq!(config.train.hidden, 32);
        assert_eq!(config.train.t_w, 500);
        assert_eq!(config.eval.n_seeds, 5);
    }

    #[test]
    fn unknown_fields_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), r#"{"train": {"typo_field": 1}}"#).unwrap();
        assert!(FileConfig::load(f.path()).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), r#"{"train": {"beta": 2.0}}"#).unwrap();
        assert!(FileConfig::load(f.path()).is_err());
    }
}
