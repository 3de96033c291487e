//! Training loop, evaluation and run records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, load_dataset, AnswerVocabulary, FeatureStore, SyntheticData, VqaExample};
use crate::encoders::{load_word_vectors, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{vqa_accuracy, Batch, Mode, Prediction, VqaModel};
use crate::optim::Adamax;
use crate::tensor::Tensor;

use super::config::TrainConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RECORD_FILE: &str = "run.json";

/// Everything a run reads, already in memory.
#[derive(Clone, Debug)]
pub struct TrainInputs {
    pub train: Vec<VqaExample>,
    pub val: Vec<VqaExample>,
    pub features: FeatureStore,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub answers: AnswerVocabulary,
}

impl TrainInputs {
    /// Loads the files named in `cfg.paths`. An empty `val` path means no
    /// validation split.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let p = &cfg.paths;
        for (name, path) in [
            ("train", &p.train),
            ("features", &p.features),
            ("feature_index", &p.feature_index),
            ("vectors", &p.vectors),
            ("answers", &p.answers),
        ] {
            if path.as_os_str().is_empty() {
                return Err(Error::Config(format!("paths.{name} is not set")));
            }
        }
        let (vocab, table) = load_word_vectors(&p.vectors)?;
        let answers = AnswerVocabulary::load(&p.answers)?;
        let max_len = cfg.model.max_question_len;
        let train = load_dataset(&p.train, &vocab, &answers, max_len)?;
        let val = if p.val.as_os_str().is_empty() {
            Vec::new()
        } else {
            load_dataset(&p.val, &vocab, &answers, max_len)?
        };
        let features = FeatureStore::load(&p.features, &p.feature_index)?;
        Ok(TrainInputs {
            train,
            val,
            features,
            vocab,
            table,
            answers,
        })
    }

    pub fn from_synthetic(data: &SyntheticData) -> Self {
        TrainInputs {
            train: data.train.clone(),
            val: data.val.clone(),
            features: data.features.clone(),
            vocab: data.vocab.clone(),
            table: data.table.clone(),
            answers: data.answers.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Absent when the run has no validation split.
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochMetrics>,
    /// Best validation accuracy (training accuracy when there is no
    /// validation split) and the 1-based epoch that reached it.
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub num_parameters: usize,
    pub wall_time_secs: f64,
}

/// Result of [`train`]: the record plus the best model.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: VqaModel,
}

fn check_dimensions(cfg: &TrainConfig, inputs: &TrainInputs) -> Result<()> {
    let m = &cfg.model;
    if inputs.features.regions() != m.regions || inputs.features.dim() != m.feature_dim {
        return Err(Error::Data(format!(
            "features are {}×{} but model expects regions = {}, feature_dim = {}",
            inputs.features.regions(),
            inputs.features.dim(),
            m.regions,
            m.feature_dim
        )));
    }
    if inputs.table.dim() != m.word_dim {
        return Err(Error::Data(format!(
            "word vectors have width {} but model.word_dim = {}",
            inputs.table.dim(),
            m.word_dim
        )));
    }
    if m.answers != 0 && m.answers != inputs.answers.len() {
        return Err(Error::Data(format!(
            "model.answers = {} but the answer list has {} entries",
            m.answers,
            inputs.answers.len()
        )));
    }
    if inputs.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for ex in inputs.train.iter().chain(&inputs.val) {
        inputs.features.get(&ex.image_id)?;
    }
    Ok(())
}

fn csv_row(m: &EpochMetrics) -> String {
    let val = m.val_acc.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{}\n", m.epoch, m.train_loss, m.train_acc, val)
}

/// Trains a model. When `out_dir` is given, writes the metrics file (one row
/// per completed epoch), the best checkpoint and the run record there.
pub fn train(cfg: &TrainConfig, inputs: &TrainInputs, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    check_dimensions(cfg, inputs)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut model = VqaModel::new(
        cfg.model.clone(),
        inputs.vocab.clone(),
        &inputs.table,
        inputs.answers.answers().to_vec(),
        &mut init_rng,
    )?;
    let mut opt = Adamax::new(cfg.optimizer)?;
    let answers = model.config.answers;
    if inputs.val.is_empty() {
        warn!("no validation split; model selection and early stopping use training accuracy");
    }

    let mut metrics_text = String::from("epoch,train_loss,train_acc,val_acc\n");
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, VqaModel)> = None;
    let mut stopped_early = false;
    let write_metrics = |text: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            let p = dir.join(METRICS_FILE);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };

    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(inputs.train.len(), cfg.batch_size, true, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let exs: Vec<&VqaExample> = idx.iter().map(|&i| &inputs.train[i]).collect();
            let batch = Batch::assemble(&exs, &inputs.features, answers)?;
            let forward = model.loss_and_grads(&batch, Mode::Train(&mut dropout_rng));
            let step = match forward {
                Ok((loss, grads, _)) if loss.is_finite() => opt.step(&mut model.params, &grads).map(|()| loss),
                Ok((loss, _, _)) => Err(Error::Numeric(format!("loss is {loss}"))),
                Err(e) if e.exit_code() == 3 => Err(e),
                Err(e) => return Err(e),
            };
            let loss = match step {
                Ok(loss) => loss,
                Err(e) => {
                    write_metrics(&metrics_text)?;
                    return Err(diverged(&model, epoch, &format!("batch {}", bi + 1), e));
                }
            };
            loss_sum += loss * idx.len() as f64;
        }
        let accuracy = |examples: &[VqaExample]| {
            evaluate_accuracy(&model, examples, &inputs.features, cfg.batch_size).map_err(|e| {
                if e.exit_code() == 3 {
                    diverged(&model, epoch, "evaluation", e)
                } else {
                    e
                }
            })
        };
        let train_acc = accuracy(&inputs.train)?;
        let val_acc = if inputs.val.is_empty() {
            None
        } else {
            Some(accuracy(&inputs.val)?)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / inputs.train.len() as f64,
            train_acc,
            val_acc,
        };
        info!(
            "epoch {epoch}: loss {:.5} train {:.4} val {}",
            m.train_loss,
            m.train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        metrics_text.push_str(&csv_row(&m));
        epochs.push(m);

        let score = val_acc.unwrap_or(train_acc);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            if let Some(dir) = out_dir {
                model.save(dir.join(CHECKPOINT_FILE))?;
            }
            best = Some((score, epoch, model.clone()));
        } else if epoch - best.as_ref().expect("set on epoch 1").1 >= cfg.patience {
            info!("no improvement for {} epochs, stopping", cfg.patience);
            stopped_early = true;
            break;
        }
        write_metrics(&metrics_text)?;
    }
    write_metrics(&metrics_text)?;

    let (best_val_acc, best_epoch, best_model) = best.expect("at least one epoch");
    let record = RunRecord {
        seed: cfg.seed,
        config: cfg.clone(),
        epochs,
        best_val_acc,
        best_epoch,
        stopped_early,
        num_parameters: best_model.num_parameters(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        let p = dir.join(RECORD_FILE);
        let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        record,
        model: best_model,
    })
}

fn diverged(model: &VqaModel, epoch: usize, stage: &str, e: Error) -> Error {
    Error::Numeric(format!(
        "training diverged at epoch {epoch}, {stage}: {e}; parameter norms: {}",
        param_norms(model)
    ))
}

fn param_norms(model: &VqaModel) -> String {
    let mut s = String::new();
    for (name, t) in model.params.iter() {
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = write!(s, "{name}={norm:.4e} ");
    }
    s.trim_end().to_string()
}

/// Per-example evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub question: String,
    pub answer: String,
    /// Target score of the predicted answer.
    pub score: f64,
    pub confidence: f64,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub rows: Vec<EvalRow>,
}

/// Evaluation-mode pass over `examples`.
pub fn evaluate(
    model: &VqaModel,
    examples: &[VqaExample],
    features: &FeatureStore,
    batch_size: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    model.check_features(features)?;
    let answers = model.config.answers;
    let mut rows = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for idx in batch_iter(examples.len(), batch_size.max(1), false, 0, 0)? {
        let exs: Vec<&VqaExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::assemble(&exs, features, answers)?;
        let (loss, preds) = model.predict(&batch)?;
        loss_sum += loss * exs.len() as f64;
        for (ex, p) in exs.into_iter().zip(preds) {
            rows.push(EvalRow {
                image_id: ex.image_id.clone(),
                question: ex.question_text.clone(),
                answer: model.answers.get(p.answer).cloned().unwrap_or_default(),
                score: ex.score(p.answer),
                confidence: p.probs[p.answer],
                prediction: p,
            });
        }
    }
    let accuracy = rows.iter().map(|r| r.score).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        accuracy,
        loss: loss_sum / rows.len() as f64,
        rows,
    })
}

fn evaluate_accuracy(
    model: &VqaModel,
    examples: &[VqaExample],
    features: &FeatureStore,
    batch_size: usize,
) -> Result<f64> {
    let mut probs = Vec::new();
    let mut targets = Vec::new();
    for idx in batch_iter(examples.len(), batch_size, false, 0, 0)? {
        let exs: Vec<&VqaExample> = idx.iter().map(|&i| &examples[i]).collect();
        let batch = Batch::assemble(&exs, features, model.config.answers)?;
        let (_, preds) = model.predict(&batch)?;
        probs.extend(preds.into_iter().map(|p| p.probs));
        targets.extend(exs.iter().map(|e| e.target_vector(model.config.answers)));
    }
    vqa_accuracy(&Tensor::from_rows(&probs), &Tensor::from_rows(&targets))
}

impl EvalReport {
    /// `index,image_id,question,answer,score,confidence` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,image_id,question,answer,score,confidence\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},{}",
                csv_field(&r.image_id),
                csv_field(&r.question),
                csv_field(&r.answer),
                r.score,
                r.confidence
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `out_dir` from the config unless overridden.
pub fn resolve_out_dir(cfg: &TrainConfig, override_dir: Option<&Path>) -> Result<PathBuf> {
    match override_dir {
        Some(d) => Ok(d.to_path_buf()),
        None if !cfg.paths.out_dir.as_os_str().is_empty() => Ok(cfg.paths.out_dir.clone()),
        None => Err(Error::Config(
            "no output directory: set paths.out_dir or pass --out-dir".into(),
        )),
    }
}
