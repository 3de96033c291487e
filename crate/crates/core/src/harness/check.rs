//! Finite-difference check of the full model on a tiny random instance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::encoders::{pad_trim_indices, EmbeddingTable, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_against, GradCheckReport, GraphObjective, Objective};
use crate::model::{Batch, Mode, ModelConfig, VqaModel};
use crate::tensor::{Activation, Tensor};

/// Largest `K·Dv·H·A` accepted; finite differences cost two forward passes
/// per coordinate.
pub const MAX_GRADCHECK_SIZE: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub regions: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub answers: usize,
    pub batch: usize,
    pub word_dim: usize,
    pub vocab_words: usize,
    pub max_question_len: usize,
    pub attention: AttentionConfig,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub weight_norm: bool,
    pub dropout_fusion: f64,
    pub dropout_classifier: f64,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            regions: 4,
            feature_dim: 5,
            hidden: 6,
            answers: 3,
            batch: 2,
            word_dim: 4,
            vocab_words: 5,
            max_question_len: 4,
            attention: AttentionConfig::a3x2(5),
            activation: Activation::LeakyRelu,
            leaky_slope: 0.1,
            weight_norm: true,
            dropout_fusion: 0.0,
            dropout_classifier: 0.2,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckConfig {
    pub fn size(&self) -> usize {
        self.regions * self.feature_dim * self.hidden * self.answers
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            word_dim: self.word_dim,
            feature_dim: self.feature_dim,
            regions: self.regions,
            answers: self.answers,
            fusion_width: 2 * self.hidden,
            classifier_width: 2 * self.hidden,
            attention: self.attention.clone(),
            dropout_fusion: self.dropout_fusion,
            dropout_classifier: self.dropout_classifier,
            activation: self.activation,
            leaky_slope: self.leaky_slope,
            weight_norm: self.weight_norm,
            finetune_embeddings: true,
            max_question_len: self.max_question_len,
        }
    }
}

/// Outcome of one check.
///
/// `groups` holds the relative error of each parameter group (`gru`,
/// `att.head0`, `cls.l1`, …) computed on the group's whole gradient vector;
/// `max_error` is the largest of them and decides `passed`. The worst single
/// coordinate is reported separately: coordinates whose true gradient is near
/// zero (the softmax score bias has an identically zero one) are dominated by
/// rounding in the loss, about 1e-11 at eps = 1e-5, so their ratio is noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub seed: u64,
    pub groups: BTreeMap<String, f64>,
    pub max_error: f64,
    pub coordinate_max_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [one] => one.to_string(),
        [a, b] => {
            if *a == "gru" || *a == "fv" || *a == "fq" {
                a.to_string()
            } else {
                format!("{a}.{b}")
            }
        }
        [a, b, ..] => format!("{a}.{b}"),
        [] => String::new(),
    }
}

/// A random model and batch; padding lengths vary across the batch.
pub fn random_instance(cfg: &GradcheckConfig) -> Result<(VqaModel, Batch)> {
    if cfg.size() > MAX_GRADCHECK_SIZE {
        return Err(Error::Config(format!(
            "gradcheck refuses K·Dv·H·A = {} > {MAX_GRADCHECK_SIZE}: finite differences need two \
             forward passes per parameter; shrink regions, feature_dim, hidden or answers",
            cfg.size()
        )));
    }
    if cfg.batch == 0 || cfg.vocab_words == 0 {
        return Err(Error::Config("gradcheck needs batch >= 1 and vocab_words >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vocab = Vocabulary::new();
    for i in 0..cfg.vocab_words {
        vocab.insert(&format!("w{i}"));
    }
    let table_data = (0..vocab.len() * cfg.word_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let table = EmbeddingTable {
        matrix: Tensor::new(vec![vocab.len(), cfg.word_dim], table_data)?,
        trainable: vec![true; vocab.len()],
    };
    let answers = (0..cfg.answers).map(|i| format!("a{i}")).collect();
    let mut model = VqaModel::new(cfg.model_config(), vocab, &table, answers, &mut rng)?;
    // Biases start at zero, which puts piecewise-linear units exactly on their
    // kink; probe a generic point instead.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") || name.starts_with("gru.b_") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }

    let features = (0..cfg.batch * cfg.regions * cfg.feature_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let questions = (0..cfg.batch)
        .map(|b| {
            let len = cfg.max_question_len.saturating_sub(b % 2).max(1);
            let idx: Vec<usize> = (0..len).map(|_| rng.gen_range(1..2 + cfg.vocab_words)).collect();
            pad_trim_indices(&idx, cfg.max_question_len)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = (0..cfg.batch * cfg.answers)
        .map(|_| [0.0, 0.3, 1.0][rng.gen_range(0..3)])
        .collect();
    let batch = Batch {
        features: Tensor::new(vec![cfg.batch * cfg.regions, cfg.feature_dim], features)?,
        questions,
        targets: Tensor::new(vec![cfg.batch, cfg.answers], targets)?,
    };
    Ok((model, batch))
}

/// Runs the check. `tamper` may alter the analytic gradients before the
/// comparison, which is how tests confirm the check can fail.
pub fn run_gradcheck(cfg: &GradcheckConfig, tamper: Option<&dyn Fn(&mut Gradients)>) -> Result<GradcheckSummary> {
    let (model, batch) = random_instance(cfg)?;
    // Every evaluation replays the same dropout masks.
    let mask_seed = cfg.seed ^ 0x5eed;
    let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        Ok(model.build(g, p, &batch, Mode::Train(&mut rng))?.loss)
    });
    let (_, mut analytic) = obj.value_and_grad(&model.params)?;
    if let Some(t) = tamper {
        t(&mut analytic);
    }
    let report: GradCheckReport = grad_check_against(&mut obj, &model.params, &analytic, cfg.eps)?;
    let groups = report.grouped(group_of);
    let max_error = groups.values().copied().fold(0.0, f64::max);
    Ok(GradcheckSummary {
        seed: cfg.seed,
        max_error,
        coordinate_max_error: report.max_error,
        coordinates: report.coordinates,
        passed: max_error < cfg.tolerance,
        groups,
    })
}
