//! Run configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamaxConfig;

use super::search::SearchSpace;

/// Input and output locations. Relative paths resolve against the directory
/// of the config file they were read from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub features: PathBuf,
    pub feature_index: PathBuf,
    pub vectors: PathBuf,
    pub answers: PathBuf,
    pub out_dir: PathBuf,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.val,
            &mut self.features,
            &mut self.feature_index,
            &mut self.vectors,
            &mut self.answers,
            &mut self.out_dir,
        ] {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub model: ModelConfig,
    pub optimizer: AdamaxConfig,
    pub paths: DataPaths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSpace>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 500,
            batch_size: 64,
            patience: 25,
            model: ModelConfig::default(),
            optimizer: AdamaxConfig::default(),
            paths: DataPaths::default(),
            search: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Checks everything that does not depend on the data. `model.answers`
    /// may still be 0 here.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let mut model = self.model.clone();
        if model.answers == 0 {
            model.answers = 1;
        }
        model.validate()?;
        self.optimizer.validate()
    }

    /// Config as a generic value tree, used for dotted-path edits.
    pub fn to_value(&self) -> Result<toml::Value> {
        toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_value(value: toml::Value) -> Result<Self> {
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Returns a copy with `path` (e.g. `model.attention.heads`) set to `value`.
    pub fn with_field(&self, path: &str, value: &toml::Value) -> Result<Self> {
        let mut tree = self.to_value()?;
        set_path(&mut tree, path, value.clone())?;
        Self::from_value(tree).map_err(|e| Error::Config(format!("setting `{path}`: {e}")))
    }
}

fn set_path(tree: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config("empty field path".into()))?;
    let mut node = tree;
    for part in parts {
        node = node
            .get_mut(part)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::Config(format!("`{path}`: no section `{part}`")))?;
    }
    node.as_table_mut()
        .expect("checked table")
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.model.answers = 7;
        cfg.model.attention.activation = Some(Activation::Tanh);
        cfg.paths.train = "data/train.jsonl".into();
        cfg.search = Some(SearchSpace::default_axes());
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(TrainConfig::from_toml("epochz = 3"), Err(Error::Config(_))));
        assert!(matches!(
            TrainConfig::from_toml("[model]\nhiden = 3"),
            Err(Error::Config(_))
        ));
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[paths]\ntrain = \"t.jsonl\"\nout_dir = \"/abs/out\"\n").unwrap();
        let cfg = TrainConfig::load(&p).unwrap();
        assert_eq!(cfg.paths.train, dir.path().join("t.jsonl"));
        assert_eq!(cfg.paths.out_dir, PathBuf::from("/abs/out"));
        assert_eq!(cfg.paths.val, PathBuf::new());
    }

    #[test]
    fn dotted_field_edits() {
        let cfg = TrainConfig::default();
        let c = cfg.with_field("model.hidden", &toml::Value::Integer(32)).unwrap();
        assert_eq!(c.model.hidden, 32);
        let c = cfg.with_field("optimizer.lr", &toml::Value::Float(5e-3)).unwrap();
        assert_eq!(c.optimizer.lr, 5e-3);
        let c = cfg
            .with_field("model.activation", &toml::Value::String("tanh".into()))
            .unwrap();
        assert_eq!(c.model.activation, Activation::Tanh);
        assert!(cfg.with_field("model.hidn", &toml::Value::Integer(3)).is_err());
        assert!(cfg.with_field("nosuch.hidden", &toml::Value::Integer(3)).is_err());
        assert!(cfg
            .with_field("model.hidden", &toml::Value::String("big".into()))
            .is_err());
    }
}
