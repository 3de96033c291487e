//! The full question-answering network: question encoder, top-down attention
//! over region features, joint embedding and multi-label classifier.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_nodes, init_attention, AttentionConfig};
use crate::autodiff::{Gradients, Graph, NodeId, ParamStore};
use crate::data::{FeatureStore, VqaExample};
use crate::encoders::{EmbeddingTable, EncodedQuestion, GruNodes, GruParams, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::layers::{dense, dense_act, init_dense};
use crate::tensor::{self, argmax, check_dropout_rate, check_slope, Act, Activation, Tensor};

pub const EMBEDDING: &str = "embedding.table";
pub const GRU: &str = "gru";
pub const ATTENTION: &str = "att";
pub const FUSE_V: &str = "fv";
pub const FUSE_Q: &str = "fq";
pub const CLS_HIDDEN: &str = "cls.l1";
pub const CLS_OUT: &str = "cls.l2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Question encoder state size.
    pub hidden: usize,
    pub word_dim: usize,
    pub feature_dim: usize,
    pub regions: usize,
    /// Number of candidate answers; 0 means "take it from the answer list".
    pub answers: usize,
    pub fusion_width: usize,
    pub classifier_width: usize,
    pub attention: AttentionConfig,
    pub dropout_fusion: f64,
    pub dropout_classifier: f64,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub weight_norm: bool,
    pub finetune_embeddings: bool,
    pub max_question_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            word_dim: 16,
            feature_dim: 16,
            regions: 6,
            answers: 0,
            fusion_width: 128,
            classifier_width: 128,
            attention: AttentionConfig::a3(128),
            dropout_fusion: 0.0,
            dropout_classifier: 0.2,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.1,
            weight_norm: true,
            finetune_embeddings: false,
            max_question_len: 14,
        }
    }
}

impl ModelConfig {
    pub fn act(&self) -> Act {
        Act::new(self.activation, self.leaky_slope)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("word_dim", self.word_dim),
            ("feature_dim", self.feature_dim),
            ("regions", self.regions),
            ("answers", self.answers),
            ("fusion_width", self.fusion_width),
            ("classifier_width", self.classifier_width),
            ("max_question_len", self.max_question_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        check_slope(self.leaky_slope)?;
        check_dropout_rate(self.dropout_fusion)?;
        check_dropout_rate(self.dropout_classifier)?;
        self.attention.validate()
    }

    /// Serialized form stored in checkpoints.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))
    }
}

/// Whether a forward pass samples dropout masks.
pub enum Mode<'a, R: Rng + ?Sized> {
    Train(&'a mut R),
    Eval,
}

/// Inputs for one forward pass over `B` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[(B·K)×Dv]`, example-major.
    pub features: Tensor,
    pub questions: Vec<EncodedQuestion>,
    /// `[B×A]` soft scores.
    pub targets: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn assemble(examples: &[&VqaExample], store: &FeatureStore, answers: usize) -> Result<Batch> {
        let (k, dv) = (store.regions(), store.dim());
        let mut feats = Vec::with_capacity(examples.len() * k * dv);
        let mut targets = Vec::with_capacity(examples.len() * answers);
        for ex in examples {
            feats.extend_from_slice(store.get(&ex.image_id)?.data());
            targets.extend(ex.target_vector(answers));
        }
        Ok(Batch {
            features: Tensor::new(vec![examples.len() * k, dv], feats)?,
            questions: examples.iter().map(|e| e.question.clone()).collect(),
            targets: Tensor::new(vec![examples.len(), answers], targets)?,
        })
    }
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub question: NodeId,
    pub pooled: NodeId,
    pub alpha: NodeId,
    pub head_weights: Vec<NodeId>,
    pub logits: NodeId,
    pub probs: NodeId,
    pub loss: NodeId,
}

/// Per-example output of [`VqaModel::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub answer: usize,
    /// Combined attention weights `[K]`.
    pub alpha: Vec<f64>,
    /// Normalized weights of each head.
    pub head_weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub answers: Vec<String>,
    pub params: ParamStore,
    /// Rows of the embedding table that receive updates.
    pub embedding_trainable: Vec<bool>,
}

impl VqaModel {
    /// Initializes every layer from `rng`. The embedding table is copied from
    /// `table`; `config.answers` is set from `answers` when left at 0.
    pub fn new<R: Rng + ?Sized>(
        mut config: ModelConfig,
        vocab: Vocabulary,
        table: &EmbeddingTable,
        answers: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        if config.answers == 0 {
            config.answers = answers.len();
        }
        if config.answers != answers.len() {
            return Err(Error::Config(format!(
                "model.answers = {} but the answer list has {} entries",
                config.answers,
                answers.len()
            )));
        }
        if table.dim() != config.word_dim {
            return Err(Error::Config(format!(
                "word vectors have width {} but model.word_dim = {}",
                table.dim(),
                config.word_dim
            )));
        }
        if table.rows() != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table has {} rows for a vocabulary of {}",
                table.rows(),
                vocab.len()
            )));
        }
        config.validate()?;

        let mut params = ParamStore::new();
        params.insert(EMBEDDING, table.matrix.clone());
        for (name, t) in GruParams::random(config.word_dim, config.hidden, rng)
            .to_store(GRU)
            .iter()
        {
            params.insert(name.clone(), t.clone());
        }
        init_attention(
            &mut params,
            ATTENTION,
            &config.attention,
            config.feature_dim,
            config.hidden,
            config.weight_norm,
            rng,
        );
        let wn = config.weight_norm;
        init_dense(&mut params, FUSE_V, config.feature_dim, config.fusion_width, wn, rng);
        init_dense(&mut params, FUSE_Q, config.hidden, config.fusion_width, wn, rng);
        init_dense(
            &mut params,
            CLS_HIDDEN,
            config.fusion_width,
            config.classifier_width,
            wn,
            rng,
        );
        init_dense(&mut params, CLS_OUT, config.classifier_width, config.answers, wn, rng);

        let mut embedding_trainable = table.trainable.clone();
        if config.finetune_embeddings {
            embedding_trainable.iter_mut().for_each(|t| *t = true);
        }
        embedding_trainable[PAD] = false;
        Ok(VqaModel {
            config,
            vocab,
            answers,
            params,
            embedding_trainable,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Builds the forward graph over `batch` using `params` (which may differ
    /// from `self.params`, e.g. during gradient checking).
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        batch: &Batch,
        mut mode: Mode<'_, R>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let (k, dv) = (cfg.regions, cfg.feature_dim);
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if batch.features.shape() != [batch.len() * k, dv] {
            return Err(Error::dim(
                "batch features",
                batch.features.shape(),
                &[batch.len() * k, dv],
            ));
        }
        if batch.targets.shape() != [batch.len(), cfg.answers] {
            return Err(Error::dim(
                "batch targets",
                batch.targets.shape(),
                &[batch.len(), cfg.answers],
            ));
        }
        let act = cfg.act();

        let table = g.param_from(params, EMBEDDING)?;
        let gru = GruNodes::bind(g, params, GRU)?;
        let qs: Vec<&EncodedQuestion> = batch.questions.iter().collect();
        let question = gru.encode_batch(g, table, &qs)?;

        let features = g.constant(batch.features.clone());
        let att_act = cfg.attention.act(act);
        let att = attend_nodes(g, params, ATTENTION, &cfg.attention, att_act, features, question, k)?;

        let v = dense_act(g, params, FUSE_V, att.pooled, act.kind, act.slope)?;
        let q = dense_act(g, params, FUSE_Q, question, act.kind, act.slope)?;
        let mut h = g.mul(v, q)?;
        h = maybe_dropout(g, h, cfg.dropout_fusion, &mut mode)?;
        h = dense_act(g, params, CLS_HIDDEN, h, act.kind, act.slope)?;
        h = maybe_dropout(g, h, cfg.dropout_classifier, &mut mode)?;
        let logits = dense(g, params, CLS_OUT, h)?;
        let probs = g.sigmoid(logits);
        let loss = g.bce(probs, batch.targets.clone())?;
        Ok(ForwardNodes {
            question,
            pooled: att.pooled,
            alpha: att.alpha,
            head_weights: att.head_weights,
            logits,
            probs,
            loss,
        })
    }

    /// Loss, gradients with frozen embedding rows zeroed, and probabilities.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        mode: Mode<'_, R>,
    ) -> Result<(f64, Gradients, Tensor)> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &self.params, batch, mode)?;
        let loss = g.value(out.loss).item()?;
        let mut grads = g.backward(out.loss)?;
        self.mask_frozen(&mut grads);
        Ok((loss, grads, g.value(out.probs).clone()))
    }

    /// Zeroes gradient rows of embedding entries that must not move.
    pub fn mask_frozen(&self, grads: &mut Gradients) {
        if let Some(gt) = grads.get_mut(EMBEDDING) {
            for (r, &trainable) in self.embedding_trainable.iter().enumerate() {
                if !trainable {
                    gt.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    /// Evaluation-mode forward pass returning per-example outputs.
    pub fn predict(&self, batch: &Batch) -> Result<(f64, Vec<Prediction>)> {
        let mut g = Graph::new();
        let out = self.build::<rand_chacha::ChaCha8Rng>(&mut g, &self.params, batch, Mode::Eval)?;
        let probs = g.value(out.probs);
        let alpha = g.value(out.alpha);
        let preds = (0..batch.len())
            .map(|b| Prediction {
                probs: probs.row(b).to_vec(),
                answer: argmax(probs.row(b)),
                alpha: alpha.row(b).to_vec(),
                head_weights: out.head_weights.iter().map(|&h| g.value(h).row(b).to_vec()).collect(),
            })
            .collect();
        Ok((g.value(out.loss).item()?, preds))
    }

    /// Encodes raw question text with this model's vocabulary.
    pub fn encode_text(&self, text: &str) -> Result<EncodedQuestion> {
        crate::encoders::pad_trim(
            &crate::encoders::tokenize(text),
            &self.vocab,
            self.config.max_question_len,
        )
    }

    /// Checks that a feature store matches the configured region grid.
    pub fn check_features(&self, store: &FeatureStore) -> Result<()> {
        if store.regions() != self.config.regions || store.dim() != self.config.feature_dim {
            return Err(Error::Data(format!(
                "features are {}×{} but the model expects {}×{}",
                store.regions(),
                store.dim(),
                self.config.regions,
                self.config.feature_dim
            )));
        }
        Ok(())
    }
}

fn maybe_dropout<R: Rng + ?Sized>(g: &mut Graph, x: NodeId, p: f64, mode: &mut Mode<'_, R>) -> Result<NodeId> {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let mask = tensor::dropout_mask(g.value(x).len(), p, &mut **rng)?;
            g.dropout_with_mask(x, mask)
        }
        _ => Ok(x),
    }
}

/// Joint embedding `act(f_v(v̂)) ∘ act(f_q(q))` for single vectors.
pub fn joint_embed(params: &ParamStore, act: Act, pooled: &Tensor, question: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(pooled.reshape(&[1, pooled.len()])?);
    let q = g.constant(question.reshape(&[1, question.len()])?);
    let v = dense_act(&mut g, params, FUSE_V, v, act.kind, act.slope)?;
    let q = dense_act(&mut g, params, FUSE_Q, q, act.kind, act.slope)?;
    let h = g.mul(v, q)?;
    Ok(Tensor::vector(g.value(h).data().to_vec()))
}

/// Answer probabilities `σ(L2(act(L1(h))))` for one joint embedding.
pub fn classify(params: &ParamStore, act: Act, joint: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = g.constant(joint.reshape(&[1, joint.len()])?);
    let h = dense_act(&mut g, params, CLS_HIDDEN, h, act.kind, act.slope)?;
    let logits = dense(&mut g, params, CLS_OUT, h)?;
    Ok(tensor::sigmoid(&Tensor::vector(g.value(logits).data().to_vec())))
}

/// Binary cross entropy summed over answers and averaged over rows.
pub fn bce_loss(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    crate::autodiff::bce_value(probs, targets)
}

/// Mean target score of the top-scoring answer (ties go to the lowest index).
pub fn vqa_accuracy(scores: &Tensor, targets: &Tensor) -> Result<f64> {
    if scores.shape() != targets.shape() || scores.rank() != 2 {
        return Err(Error::dim("vqa_accuracy", scores.shape(), targets.shape()));
    }
    if scores.rows() == 0 {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let total: f64 = (0..scores.rows()).map(|b| targets.row(b)[argmax(scores.row(b))]).sum();
    Ok(total / scores.rows() as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VQAC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.into(),
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

impl VqaModel {
    /// Serializes configuration, vocabularies, frozen-row mask and all
    /// parameters. Equal models produce identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        put_str(&mut out, &self.config.to_toml()?)?;
        put_str(&mut out, &self.vocab.tokens().join("\n"))?;
        put_str(&mut out, &self.answers.join("\n"))?;
        put_u32(&mut out, self.embedding_trainable.len())?;
        out.extend(self.embedding_trainable.iter().map(|&t| t as u8));
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "VQAC".into(),
            });
        }
        let mut r = Reader { bytes, pos: 4, path };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let config: ModelConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::format(path, format!("bad model config: {e}")))?;
        config.validate()?;
        let vocab_text = r.string()?;
        let tokens: Vec<&str> = vocab_text.split('\n').collect();
        let mut vocab = Vocabulary::new();
        if tokens.len() < 2 || tokens[..2] != *vocab.tokens() {
            return Err(Error::format(path, "vocabulary must start with the reserved tokens"));
        }
        for t in &tokens[2..] {
            vocab.insert(t);
        }
        if vocab.len() != tokens.len() {
            return Err(Error::format(path, "duplicate vocabulary token"));
        }
        let answers_text = r.string()?;
        let answers: Vec<String> = if answers_text.is_empty() {
            Vec::new()
        } else {
            answers_text.split('\n').map(str::to_string).collect()
        };
        let n = r.u32()?;
        let embedding_trainable = r.take(n)?.iter().map(|&b| b != 0).collect();
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            if rank > 3 {
                return Err(Error::format(path, format!("parameter `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::format(path, "parameter too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = VqaModel {
            config,
            vocab,
            answers,
            params,
            embedding_trainable,
        };
        model.check_consistency(path)?;
        Ok(model)
    }

    fn check_consistency(&self, path: &Path) -> Result<()> {
        let table = self
            .params
            .get(EMBEDDING)
            .map_err(|_| Error::format(path, "missing embedding table"))?;
        if table.shape() != [self.vocab.len(), self.config.word_dim]
            || self.embedding_trainable.len() != self.vocab.len()
        {
            return Err(Error::format(path, "embedding table does not match the vocabulary"));
        }
        if self.answers.len() != self.config.answers {
            return Err(Error::format(path, "answer list does not match model.answers"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attend, AttentionParams};
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::encoders::encode_question;
    use crate::gradcheck::{grad_check, GraphObjective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: 6,
            word_dim: 16,
            feature_dim: 16,
            regions: 6,
            fusion_width: 8,
            classifier_width: 7,
            attention: AttentionConfig::a3x2(5),
            dropout_classifier: 0.0,
            ..Default::default()
        }
    }

    fn setup(cfg: ModelConfig, seed: u64) -> (VqaModel, crate::data::SyntheticData) {
        let data = make_synthetic(&SyntheticSpec::single(seed, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = VqaModel::new(
            cfg,
            data.vocab.clone(),
            &data.table,
            data.answers.answers().to_vec(),
            &mut rng,
        )
        .unwrap();
        (model, data)
    }

    fn batch_of(data: &crate::data::SyntheticData, n: usize, answers: usize) -> Batch {
        let exs: Vec<&VqaExample> = data.train.iter().take(n).collect();
        Batch::assemble(&exs, &data.features, answers).unwrap()
    }

    #[test]
    fn batched_forward_matches_single_example_oracle() {
        let (model, data) = setup(tiny_config(), 3);
        let batch = batch_of(&data, 4, model.config.answers);
        let (_, preds) = model.predict(&batch).unwrap();

        let gru = GruParams::from_store(&model.params, GRU).unwrap();
        let table = EmbeddingTable {
            matrix: model.params.get(EMBEDDING).unwrap().clone(),
            trainable: model.embedding_trainable.clone(),
        };
        let att = AttentionParams {
            store: model.params.clone(),
            prefix: ATTENTION.into(),
        };
        let act = model.config.act();
        for (b, ex) in data.train.iter().take(4).enumerate() {
            let q = encode_question(&ex.question.indices, ex.question.len, &table, &gru).unwrap();
            let feats = data.features.get(&ex.image_id).unwrap();
            let out = attend(&model.config.attention, act, &att, feats, &q).unwrap();
            let joint = joint_embed(&model.params, act, &out.pooled, &q).unwrap();
            let probs = classify(&model.params, act, &joint).unwrap();
            for (a, e) in preds[b].probs.iter().zip(probs.data()) {
                assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
            }
            for (a, e) in preds[b].alpha.iter().zip(out.alpha.data()) {
                assert!((a - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for seed in 0..3 {
            let cfg = ModelConfig {
                activation: Activation::Tanh,
                ..tiny_config()
            };
            let (model, data) = setup(cfg, seed);
            let batch = batch_of(&data, 2, model.config.answers);
            let mut obj = GraphObjective(|g: &mut Graph, p: &ParamStore| {
                Ok(model.build::<ChaCha8Rng>(g, p, &batch, Mode::Eval)?.loss)
            });
            let report = grad_check(&mut obj, &model.params, 1e-5).unwrap();
            assert!(report.passes(1e-4), "seed {seed}: {:?}", report.per_param);
        }
    }

    #[test]
    fn frozen_rows_get_no_gradient() {
        let (model, data) = setup(tiny_config(), 1);
        let batch = batch_of(&data, 3, model.config.answers);
        let (_, grads, _) = model.loss_and_grads::<ChaCha8Rng>(&batch, Mode::Eval).unwrap();
        let g = grads.get(EMBEDDING).unwrap();
        for (r, &t) in model.embedding_trainable.iter().enumerate() {
            if !t {
                assert!(g.row(r).iter().all(|&v| v == 0.0));
            }
        }
        assert!(!model.embedding_trainable[PAD]);
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = ModelConfig {
            dropout_classifier: 0.5,
            dropout_fusion: 0.3,
            ..tiny_config()
        };
        let (model, data) = setup(cfg, 2);
        let batch = batch_of(&data, 3, model.config.answers);
        let (a, _) = model.predict(&batch).unwrap();
        let (b, _) = model.predict(&batch).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (c, _, _) = model.loss_and_grads(&batch, Mode::Train(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (model, _) = setup(tiny_config(), 4);
        let bytes = model.to_bytes().unwrap();
        let back = VqaModel::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let p = Path::new("mem");
        assert!(matches!(VqaModel::from_bytes(b"NOPE", p), Err(Error::BadMagic { .. })));
        assert!(matches!(
            VqaModel::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn accuracy_and_loss_examples() {
        let scores = Tensor::from_rows(&[vec![0.9, 0.1, 0.9], vec![0.2, 0.7, 0.1]]);
        let targets = Tensor::from_rows(&[vec![0.3, 1.0, 1.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(vqa_accuracy(&scores, &targets).unwrap(), 0.15);
        let p = Tensor::from_rows(&[vec![0.5]]);
        let t = Tensor::from_rows(&[vec![1.0]]);
        assert!((bce_loss(&p, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(vqa_accuracy(&Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn config_mismatches_are_rejected() {
        let data = make_synthetic(&SyntheticSpec::single(0, 10)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let answers = data.answers.answers().to_vec();
        let bad_dim = ModelConfig {
            word_dim: 8,
            ..tiny_config()
        };
        assert!(VqaModel::new(bad_dim, data.vocab.clone(), &data.table, answers.clone(), &mut rng).is_err());
        let bad_slope = ModelConfig {
            leaky_slope: 1.5,
            ..tiny_config()
        };
        assert!(matches!(
            VqaModel::new(bad_slope, data.vocab.clone(), &data.table, answers, &mut rng),
            Err(Error::Config(_))
        ));
    }
}
