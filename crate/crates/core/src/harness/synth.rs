//! Writes a synthetic dataset as the files a run config points at.

use std::fs;
use std::path::Path;

use crate::data::{write_dataset, SyntheticData};
use crate::encoders::write_word_vectors;
use crate::error::{Error, Result};

use super::config::{DataPaths, TrainConfig};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const FEATURES_FILE: &str = "features.vqaf";
pub const INDEX_FILE: &str = "features.idx";
pub const VECTORS_FILE: &str = "vectors.txt";
pub const ANSWERS_FILE: &str = "answers.txt";
pub const SPEC_FILE: &str = "synth.toml";
pub const CONFIG_FILE: &str = "train.toml";

/// Writes every file of `data` into `dir` together with a run config whose
/// model dimensions match it. Paths in the config are relative to `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<TrainConfig> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(dir.join(TRAIN_FILE), &data.train, &data.answers)?;
    write_dataset(dir.join(VAL_FILE), &data.val, &data.answers)?;
    data.features.write(dir.join(FEATURES_FILE), dir.join(INDEX_FILE))?;
    write_word_vectors(dir.join(VECTORS_FILE), &data.vocab, &data.table)?;
    data.answers.save(dir.join(ANSWERS_FILE))?;
    let spec = toml::to_string(&data.spec).map_err(|e| Error::Config(e.to_string()))?;
    let p = dir.join(SPEC_FILE);
    fs::write(&p, spec).map_err(|e| Error::io(&p, e))?;

    let mut cfg = TrainConfig {
        seed: data.spec.seed,
        paths: DataPaths {
            train: TRAIN_FILE.into(),
            val: VAL_FILE.into(),
            features: FEATURES_FILE.into(),
            feature_index: INDEX_FILE.into(),
            vectors: VECTORS_FILE.into(),
            answers: ANSWERS_FILE.into(),
            out_dir: "run".into(),
        },
        ..Default::default()
    };
    cfg.model.regions = data.spec.regions;
    cfg.model.feature_dim = data.spec.feature_dim;
    cfg.model.word_dim = data.spec.word_dim;
    cfg.model.answers = data.answers.len();
    cfg.save(dir.join(CONFIG_FILE))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::harness::train::TrainInputs;

    #[test]
    fn written_files_load_back_identically() {
        let data = make_synthetic(&SyntheticSpec::single(2, 30)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(&data, dir.path()).unwrap();
        let cfg = TrainConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
        let inputs = TrainInputs::load(&cfg).unwrap();
        assert_eq!(inputs.train, data.train);
        assert_eq!(inputs.val, data.val);
        assert_eq!(inputs.vocab, data.vocab);
        assert_eq!(inputs.table.matrix, data.table.matrix);
        assert_eq!(inputs.features, data.features);
        assert_eq!(cfg.paths.out_dir, dir.path().join("run"));
    }
}
